//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (run with `cargo test --test acceptance -- --nocapture`
//! to see them). Tolerances and time limits are pinned in the asserts.

use std::collections::HashSet;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;

use udkit::conllu::{concat_treebanks, parse_document, Dataset, Sentence, Token};
use udkit::decode::{
    brute_force_arborescence, is_single_rooted_tree, max_arborescence, ArcScoreMatrix,
};
use udkit::encoder::EncoderConfig;
use udkit::heads::{
    bilinear_arc_scores, init_biaffine_parser, label_scores, tag_forward, init_tagger, TagVocab,
    TagVocabs,
};
use udkit::lemma::{apply_lemma_script, compute_lemma_script, script_cost, shortest_edit_script};
use udkit::metrics::{evaluate, EvalOptions, MetricCount};
use udkit::model::{LossHyper, Model, ModelConfig, Task};
use udkit::subword::{window_long_sequence, SubwordVocab};
use udkit::tensor::{
    central_difference_gradients, max_relative_error, Graph, ParamStore, Tensor, Var,
};
use udkit::train::{noam_lr, train, TrainConfig, TrainOptions};

fn criterion(number: usize, name: &str, passed: bool, detail: &str) {
    let verdict = if passed { "PASS" } else { "FAIL" };
    println!("criterion {number} ({name}): {verdict} [{detail}]");
    assert!(passed, "criterion {number} ({name}) failed: {detail}");
}

fn data_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn load_sample(name: &str) -> Vec<Sentence> {
    parse_document(&fs::read_to_string(data_path(name)).expect(name)).expect(name)
}

fn sample_vocab() -> SubwordVocab {
    SubwordVocab::from_lines(&fs::read_to_string(data_path("pieces.txt")).unwrap()).unwrap()
}

const SAMPLES: [&str; 4] = [
    "en_sample.conllu",
    "de_sample.conllu",
    "ru_sample.conllu",
    "en_toy-train.conllu",
];

// --------------------------------------------------------------------------
// 1. Edit-script round trip on real treebank samples.
// --------------------------------------------------------------------------

#[test]
fn criterion_01_edit_script_round_trip() {
    let start = Instant::now();
    let mut pairs = 0usize;
    let mut failures = 0usize;
    for name in SAMPLES {
        for sentence in load_sample(name) {
            for token in &sentence.tokens {
                let Some(lemma) = &token.lemma else { continue };
                pairs += 1;
                let script = compute_lemma_script(&token.form, lemma);
                let (applied, fell_back) = apply_lemma_script(&script, &token.form);
                if fell_back || &applied != lemma {
                    failures += 1;
                }
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    criterion(
        1,
        "edit-script round trip",
        failures == 0 && pairs > 700 && elapsed < 10.0,
        &format!("{pairs} pairs over 4 files (Latin + Cyrillic), {failures} failures, {elapsed:.2}s"),
    );
}

// --------------------------------------------------------------------------
// 2. Edit-script optimality, exhaustive over a 3-letter alphabet.
// --------------------------------------------------------------------------

/// Distance-only reference: rolling-row Levenshtein over bytes. The script
/// builder works char-wise with a full backtrace table; this shares only
/// the recurrence.
fn reference_distance(a: &[u8], b: &[u8]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Breadth-first search over single-character edits: ground truth for
/// small distances, anchoring the rolling-row reference.
fn bfs_distance(source: &str, target: &str, max_depth: usize) -> Option<usize> {
    let alphabet: Vec<char> = {
        let set: HashSet<char> = source.chars().chain(target.chars()).collect();
        set.into_iter().collect()
    };
    let mut frontier = HashSet::from([source.to_string()]);
    for depth in 0..=max_depth {
        if frontier.contains(target) {
            return Some(depth);
        }
        let mut next = HashSet::new();
        for word in &frontier {
            let chars: Vec<char> = word.chars().collect();
            for i in 0..chars.len() {
                let mut deleted = chars.clone();
                deleted.remove(i);
                next.insert(deleted.iter().collect::<String>());
                for &c in &alphabet {
                    let mut sub = chars.clone();
                    sub[i] = c;
                    next.insert(sub.iter().collect::<String>());
                }
            }
            for i in 0..=chars.len() {
                for &c in &alphabet {
                    let mut ins = chars.clone();
                    ins.insert(i, c);
                    next.insert(ins.iter().collect::<String>());
                }
            }
        }
        frontier = next;
    }
    None
}

#[test]
fn criterion_02_edit_script_optimality_exhaustive() {
    let start = Instant::now();
    let mut strings: Vec<String> = vec![String::new()];
    let mut last: Vec<String> = vec![String::new()];
    for _ in 0..8 {
        let mut next = Vec::with_capacity(last.len() * 3);
        for s in &last {
            for c in ["a", "b", "c"] {
                next.push(format!("{s}{c}"));
            }
        }
        strings.extend(next.iter().cloned());
        last = next;
    }
    assert_eq!(strings.len(), (3usize.pow(9) - 1) / 2); // 9841

    // Anchor the rolling-row reference against BFS ground truth.
    let mut rng = StdRng::seed_from_u64(2);
    for _ in 0..60 {
        let a = &strings[rng.gen_range(0..strings.len())];
        let b = &strings[rng.gen_range(0..strings.len())];
        let d = reference_distance(a.as_bytes(), b.as_bytes());
        if d <= 3 {
            assert_eq!(bfs_distance(a, b, 3), Some(d), "reference wrong for ({a}, {b})");
        } else {
            assert_eq!(bfs_distance(a, b, 3), None, "reference wrong for ({a}, {b})");
        }
    }

    let mismatches: usize = strings
        .par_iter()
        .map(|a| {
            let mut bad = 0;
            for b in &strings {
                let ops = shortest_edit_script(a, b);
                if script_cost(&ops) != reference_distance(a.as_bytes(), b.as_bytes()) {
                    bad += 1;
                }
            }
            bad
        })
        .sum();
    let elapsed = start.elapsed().as_secs_f64();
    let total = strings.len() * strings.len();
    criterion(
        2,
        "edit-script optimality",
        mismatches == 0 && elapsed < 60.0,
        &format!("{total} pairs exhaustively, {mismatches} suboptimal, {elapsed:.1}s"),
    );
}

// --------------------------------------------------------------------------
// 3. Arborescence decoding: optimality vs brute force, validity under fuzz.
// --------------------------------------------------------------------------

#[test]
fn criterion_03_arborescence_correctness() {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(3);
    let mut score_mismatches = 0usize;
    for n in 2..=6 {
        for _ in 0..1000 {
            let rows: Vec<Vec<f64>> = (0..=n)
                .map(|_| (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect())
                .collect();
            let matrix = ArcScoreMatrix::from_rows(rows).unwrap();
            let fast = max_arborescence(&matrix);
            let brute = brute_force_arborescence(&matrix).unwrap();
            if (matrix.total(&fast) - matrix.total(&brute)).abs() > 1e-9 {
                score_mismatches += 1;
            }
        }
    }

    let mut invalid = 0usize;
    for _ in 0..10_000 {
        let n = rng.gen_range(1..=12);
        let rows: Vec<Vec<f64>> = (0..=n)
            .map(|_| (0..n).map(|_| rng.gen_range(-100.0..100.0)).collect())
            .collect();
        let matrix = ArcScoreMatrix::from_rows(rows).unwrap();
        if !is_single_rooted_tree(&max_arborescence(&matrix)) {
            invalid += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    criterion(
        3,
        "arborescence correctness",
        score_mismatches == 0 && invalid == 0 && elapsed < 120.0,
        &format!(
            "5000 oracle comparisons (n=2..6): {score_mismatches} suboptimal; \
             10000 fuzzed decodes (n<=12): {invalid} invalid; {elapsed:.1}s"
        ),
    );
}

// --------------------------------------------------------------------------
// 4. Gradient fidelity of every differentiable operation.
// --------------------------------------------------------------------------

fn gradcheck(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.leaf(t.clone())).collect();
    let out = f(&mut graph, &vars);
    graph.backward(out);
    let numeric = central_difference_gradients(inputs, 1e-5, &f);
    vars.iter()
        .zip(&numeric)
        .map(|(&v, n)| max_relative_error(graph.grad(v), n))
        .fold(0.0, f64::max)
}

#[test]
fn criterion_04_gradient_fidelity() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = StdRng::seed_from_u64(seed);
        let t = |rng: &mut StdRng, shape: &[usize]| Tensor::randn(shape, 1.0, rng);
        let mut check = |inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Var| {
            worst = worst.max(gradcheck(inputs, f));
        };

        // Core tensor operations, composed so every backward path runs.
        let (a, b) = (t(&mut rng, &[3, 4]), t(&mut rng, &[4, 2]));
        check(&[a, b], &|g, v| {
            let m = g.matmul(v[0], v[1]);
            let s = g.scale(m, 0.7);
            g.sum_all(s)
        });
        let (x, y) = (t(&mut rng, &[2, 5]), t(&mut rng, &[2, 5]));
        check(&[x, y], &|g, v| {
            let s = g.add(v[0], v[1]);
            let p = g.mul(s, v[0]);
            let r = g.row_sums(p);
            let q = g.reshape(r, &[1, 2]);
            let qq = g.mul(q, q);
            g.sum_all(qq)
        });
        let (x, bias, col) = (t(&mut rng, &[3, 4]), t(&mut rng, &[4]), t(&mut rng, &[3]));
        check(&[x, bias, col], &|g, v| {
            let rb = g.add_row_broadcast(v[0], v[1]);
            let cb = g.add_col_broadcast(rb, v[2]);
            let ge = g.gelu(cb);
            g.sum_all(ge)
        });
        let (x, gain, bias) = (t(&mut rng, &[3, 6]), t(&mut rng, &[6]), t(&mut rng, &[6]));
        check(&[x, gain, bias], &|g, v| {
            let ln = g.layer_norm(v[0], v[1], v[2]);
            let sm = g.softmax_rows(ln);
            let w = g.leaf(Tensor::from_vec(
                &[6, 1],
                vec![0.9, -1.4, 0.3, 2.0, -0.2, 0.5],
            ));
            let m = g.matmul(sm, w);
            g.sum_all(m)
        });
        let table = t(&mut rng, &[7, 4]);
        check(&[table], &|g, v| {
            let e = g.embedding(v[0], &[2, 6, 6, 0]);
            let tr = g.transpose(e);
            let sl = g.slice_cols(tr, 1, 4);
            g.sum_all(sl)
        });
        let (p1, p2) = (t(&mut rng, &[2, 3]), t(&mut rng, &[2, 2]));
        check(&[p1, p2], &|g, v| {
            let cc = g.concat_cols(&[v[0], v[1]]);
            let cr = g.concat_rows(&[cc, cc]);
            let sq = g.mul(cr, cr);
            g.sum_all(sq)
        });
        let x = t(&mut rng, &[3, 4]);
        let mask: Vec<f64> = (0..12).map(|i| if i % 3 == 0 { 0.0 } else { 2.0 }).collect();
        check(&[x], &|g, v| {
            let d = g.dropout_with_mask(v[0], mask.clone());
            let sq = g.mul(d, d);
            g.sum_all(sq)
        });

        // Scalar layer mixture, with and without a dropped layer.
        for alive in [[true, true, true], [true, false, true]] {
            let layers = [t(&mut rng, &[2, 3]), t(&mut rng, &[2, 3]), t(&mut rng, &[2, 3])];
            let w = t(&mut rng, &[3]);
            let c = Tensor::scalar(1.0 + seed as f64 / 100.0);
            check(
                &[layers[0].clone(), layers[1].clone(), layers[2].clone(), w, c],
                &move |g, v| {
                    let m = g.scalar_mix(&[v[0], v[1], v[2]], v[3], v[4], &alive);
                    let sq = g.mul(m, m);
                    g.sum_all(sq)
                },
            );
        }

        // Label-smoothed cross entropy, plain and with banned columns.
        let logits = t(&mut rng, &[3, 5]);
        check(&[logits], &|g, v| g.smoothed_ce(v[0], &[4, 0, 2], 0.03));
        let logits = t(&mut rng, &[3, 5]);
        let banned = [Some(0), None, Some(4)];
        check(&[logits], &|g, v| {
            g.smoothed_ce_banned(v[0], &[1, 2, 3], 0.03, &banned)
        });

        // Biaffine arc scoring core and the full task heads.
        let (head, dep, u, hb) = (
            t(&mut rng, &[4, 3]),
            t(&mut rng, &[3, 3]),
            t(&mut rng, &[3, 3]),
            t(&mut rng, &[3, 1]),
        );
        check(&[head, dep, u, hb], &|g, v| {
            let s = bilinear_arc_scores(g, v[0], v[1], v[2], v[3]);
            let sq = g.mul(s, s);
            g.sum_all(sq)
        });

        let mut store = ParamStore::new();
        let labels = TagVocab::from_values(["root", "obj", "nsubj"].into_iter());
        let parser = init_biaffine_parser(&mut store, 4, 3, 2, labels, &mut rng);
        let tagger = init_tagger(
            &mut store,
            &format!("t{seed}"),
            4,
            TagVocab::from_values(["A", "B"].into_iter()),
            &mut rng,
        );
        let embeddings = t(&mut rng, &[3, 4]);
        let gold_heads = [0usize, 1, 1];
        check(&[embeddings], &|g, v| {
            let arc = udkit::heads::arc_scores(g, &store, &parser, v[0]);
            let arc_term = udkit::heads::arc_loss(g, arc, &gold_heads, 0.03);
            let lab = label_scores(g, &store, &parser, v[0], &gold_heads);
            let lab_term = g.smoothed_ce(lab, &[1, 2, 3], 0.03);
            let tag = tag_forward(g, &store, &tagger, v[0]);
            let tag_term = g.smoothed_ce(tag, &[0, 1, 2], 0.03);
            g.add_scalars(&[arc_term, lab_term, tag_term])
        });
    }
    let elapsed = start.elapsed().as_secs_f64();
    criterion(
        4,
        "gradient fidelity",
        worst < 1e-6 && elapsed < 120.0,
        &format!("100 seeds, worst relative error {worst:.2e}, {elapsed:.1}s"),
    );
}

// --------------------------------------------------------------------------
// 5. Layer-mixture contract: normalization, exact zeroing, task isolation.
// --------------------------------------------------------------------------

#[test]
fn criterion_05_layer_mixture_contract() {
    // Basis layers make the mixture output the weight vector itself:
    // layer i = e_i as a (1, L) row, so output = c * [a_0 .. a_{L-1}].
    let layers_count = 5;
    let mut rng = StdRng::seed_from_u64(5);
    let mut max_sum_err: f64 = 0.0;
    let mut nonzero_dropped = 0usize;
    for trial in 0..200 {
        let w = Tensor::randn(&[layers_count], 2.0, &mut rng);
        let dropped: Vec<bool> = if trial % 2 == 0 {
            vec![false; layers_count]
        } else {
            let mut d: Vec<bool> = (0..layers_count).map(|_| rng.gen::<f64>() < 0.4).collect();
            if d.iter().all(|&x| x) {
                d[0] = false;
            }
            d
        };
        let mut graph = Graph::new();
        let basis: Vec<Var> = (0..layers_count)
            .map(|i| {
                let mut row = vec![0.0; layers_count];
                row[i] = 1.0;
                graph.leaf(Tensor::from_vec(&[1, layers_count], row))
            })
            .collect();
        let wv = graph.leaf(w);
        let c = graph.leaf(Tensor::scalar(1.0));
        let alive: Vec<bool> = dropped.iter().map(|&d| !d).collect();
        let mix = graph.scalar_mix(&basis, wv, c, &alive);
        let weights = graph.value(mix).data();
        let sum: f64 = weights.iter().sum();
        max_sum_err = max_sum_err.max((sum - 1.0).abs());
        for (i, &d) in dropped.iter().enumerate() {
            if d && weights[i] != 0.0 {
                nonzero_dropped += 1;
            }
            if !d && weights[i] < 0.0 {
                nonzero_dropped += 1;
            }
        }
    }

    // Per-task independence, bit-exact: perturbing one task's mixture
    // parameters leaves every other task's embeddings identical.
    let sentences = load_sample("en_sample.conllu");
    let vocabs = TagVocabs::from_sentences(sentences.iter());
    let vocab = sample_vocab();
    let config = ModelConfig {
        encoder: EncoderConfig {
            num_layers: 3,
            num_heads: 2,
            hidden_dim: 12,
            ff_dim: 24,
            max_positions: 64,
            vocab_size: vocab.len(),
            attention_dropout: 0.0,
            hidden_dropout: 0.0,
        },
        arc_dim: 8,
        tag_dim: 6,
    };
    let mut model = Model::new(config, vocab, vocabs, 5);
    let hyper = LossHyper {
        label_smoothing: 0.0,
        layer_output_dropout: 0.0,
        layer_dropout: 0.0,
    };
    let words = sentences[0].forms();
    let seg = model.segment(&words);
    let embed = |model: &Model| -> Vec<Vec<u64>> {
        let mut g = Graph::new();
        let logits = model.sentence_logits(&mut g, &seg.piece_ids, &seg, &[0; 4], &hyper, None);
        [logits.upos, logits.ufeats, logits.lemma, logits.arc]
            .iter()
            .map(|&v| g.value(v).data().iter().map(|x| x.to_bits()).collect())
            .collect()
    };
    let before = embed(&model);
    let id = model.attentions[Task::Deps as usize].weights;
    model.store.get_mut(id).value.data_mut()[1] += 2.5;
    let after = embed(&model);
    let isolated = before[0] == after[0] && before[1] == after[1] && before[2] == after[2];
    let deps_changed = before[3] != after[3];

    criterion(
        5,
        "layer-mixture contract",
        max_sum_err < 1e-12 && nonzero_dropped == 0 && isolated && deps_changed,
        &format!(
            "weight-sum error {max_sum_err:.1e}; dropped-layer leaks {nonzero_dropped}; \
             task isolation bit-exact: {isolated}"
        ),
    );
}

// --------------------------------------------------------------------------
// 6. Schedule curve at the reference hyperparameters.
// --------------------------------------------------------------------------

#[test]
fn criterion_06_schedule_curve() {
    let peak = 1e-3;
    let warmup = 8000;
    let at_peak = (noam_lr(warmup, warmup, peak) - peak).abs();
    let at_half_warm = (noam_lr(4000, warmup, peak) - peak / 2.0).abs();
    let at_decay = (noam_lr(32000, warmup, peak) - peak / 2.0).abs();
    criterion(
        6,
        "schedule curve",
        at_peak <= 1e-15 && at_half_warm <= 1e-15 && at_decay <= 1e-15,
        &format!("errors: peak {at_peak:.1e}, warmup/2 {at_half_warm:.1e}, 4x warmup {at_decay:.1e}"),
    );
}

// --------------------------------------------------------------------------
// 7. Overfit check on 100 sample sentences.
// --------------------------------------------------------------------------

#[test]
fn criterion_07_overfit_check() {
    let start = Instant::now();
    let sentences = load_sample("en_toy-train.conllu");
    assert_eq!(sentences.len(), 100);
    let vocab = sample_vocab();
    let vocabs = TagVocabs::from_sentences(sentences.iter());
    let dataset =
        concat_treebanks(vec![("toy".to_string(), sentences.clone())]).unwrap();

    let config = ModelConfig {
        encoder: EncoderConfig {
            num_layers: 4,
            num_heads: 4,
            hidden_dim: 64,
            ff_dim: 256,
            max_positions: 96,
            vocab_size: vocab.len(),
            attention_dropout: 0.0,
            hidden_dropout: 0.0,
        },
        arc_dim: 128,
        tag_dim: 64,
    };
    let mut model = Model::new(config, vocab, vocabs, 13);
    let train_config = TrainConfig {
        base_lr: 2e-3,
        encoder_lr: 1e-3,
        warmup_steps: 80,
        batch_size: 32,
        epochs: 120,
        mask_prob: 0.0,
        label_smoothing: 0.0,
        dropout: 0.0,
        encoder_dropout: 0.0,
        layer_dropout: 0.0,
        weight_decay: 0.0,
        beta1: 0.9,
        beta2: 0.99,
        grad_clip: 5.0,
        length_fuzz: 0.1,
        seed: 13,
    };
    let outcome = train(
        &mut model,
        &dataset,
        &train_config,
        &TrainOptions {
            dev: Some(&sentences),
            out_dir: None,
            eval_every: 10,
        },
    )
    .unwrap();

    let reached = outcome.per_epoch.iter().find(|m| {
        m.dev.as_ref().map_or(false, |r| {
            r.upos.fraction().unwrap_or(0.0) >= 0.99 && r.las.fraction().unwrap_or(0.0) >= 0.95
        })
    });
    let elapsed = start.elapsed().as_secs_f64();
    let last_eval = outcome
        .per_epoch
        .iter()
        .rev()
        .find_map(|m| m.dev.as_ref().map(|r| (m.epoch, r.upos, r.las)));
    criterion(
        7,
        "overfit check",
        reached.is_some() && elapsed < 900.0,
        &format!(
            "thresholds (UPOS >= 0.99 and LAS >= 0.95) {} within 120 <= 200 epochs; last eval {:?}; {elapsed:.0}s < 900s",
            reached.map_or("not reached".to_string(), |m| format!("reached at epoch {}", m.epoch)),
            last_eval.map(|(e, u, l)| (
                e,
                u.fraction().unwrap_or(0.0),
                l.fraction().unwrap_or(0.0)
            )),
        ),
    );
}

// --------------------------------------------------------------------------
// 8. Multilingual mixing: joint training on disjoint synthetic grammars.
// --------------------------------------------------------------------------

/// Deterministic synthetic grammar: subject-verb-object or
/// subject-object-verb order with its own closed vocabulary and toy
/// suffix morphology (plural `-s` nouns, past `-d` verbs).
fn synthetic_language(
    nouns: &[&str],
    verbs: &[&str],
    det: &str,
    verb_final: bool,
    count: usize,
    offset: usize,
) -> Vec<Sentence> {
    let mut out = Vec::with_capacity(count);
    for i in offset..offset + count {
        let n1 = nouns[i % nouns.len()];
        let n2 = nouns[(i / 2 + 1) % nouns.len()];
        let v = verbs[i % verbs.len()];
        let plural = i % 3 == 0;
        let past = i % 2 == 0;
        let subj_form = if plural { format!("{n1}s") } else { n1.to_string() };
        let subj_feats = if plural { "Number=Plur" } else { "Number=Sing" };
        let verb_form = if past { format!("{v}d") } else { v.to_string() };
        let verb_feats = if past { "Tense=Past" } else { "Tense=Pres" };

        let mut sentence = Sentence::default();
        let mut push = |sentence: &mut Sentence, form: &str, lemma: &str, upos: &str, feats: &str, head: usize, rel: &str| {
            let id = sentence.tokens.len() + 1;
            let mut token = Token::bare(id, form);
            token.lemma = Some(lemma.to_string());
            token.upos = Some(upos.to_string());
            token.ufeats = feats.to_string();
            token.head = Some(head);
            token.deprel = Some(rel.to_string());
            sentence.tokens.push(token);
        };
        if verb_final {
            // det N  det N  V . with the verb as word 5.
            push(&mut sentence, det, det, "DET", "_", 2, "det");
            push(&mut sentence, &subj_form, n1, "NOUN", subj_feats, 5, "nsubj");
            push(&mut sentence, det, det, "DET", "_", 4, "det");
            push(&mut sentence, n2, n2, "NOUN", "Number=Sing", 5, "obj");
            push(&mut sentence, &verb_form, v, "VERB", verb_feats, 0, "root");
            push(&mut sentence, ".", ".", "PUNCT", "_", 5, "punct");
        } else {
            // det N V det N .
            push(&mut sentence, det, det, "DET", "_", 2, "det");
            push(&mut sentence, &subj_form, n1, "NOUN", subj_feats, 3, "nsubj");
            push(&mut sentence, &verb_form, v, "VERB", verb_feats, 0, "root");
            push(&mut sentence, det, det, "DET", "_", 5, "det");
            push(&mut sentence, n2, n2, "NOUN", "Number=Sing", 3, "obj");
            push(&mut sentence, ".", ".", "PUNCT", "_", 3, "punct");
        }
        out.push(sentence);
    }
    out
}

#[test]
fn criterion_08_multilingual_mixing() {
    let start = Instant::now();
    let lang_a = |count, offset| {
        synthetic_language(
            &["miko", "tura", "pelo", "sava", "nuri"],
            &["runa", "bela", "kota"],
            "da",
            false,
            count,
            offset,
        )
    };
    let lang_b = |count, offset| {
        synthetic_language(
            &["zemi", "kolu", "vashi", "uren", "pilda"],
            &["tazen", "virgen", "domen"],
            "ul",
            true,
            count,
            offset,
        )
    };
    let train_a = lang_a(60, 0);
    let dev_a = lang_a(20, 60);
    let train_b = lang_b(60, 0);
    let dev_b = lang_b(20, 60);

    // The vocabularies really are disjoint.
    let forms = |s: &[Sentence]| -> HashSet<String> {
        s.iter()
            .flat_map(|x| x.tokens.iter().map(|t| t.form.clone()))
            .filter(|f| f != ".")
            .collect()
    };
    assert!(forms(&train_a).is_disjoint(&forms(&train_b)));

    let vocab = sample_vocab();
    let build_and_train = |treebanks: Vec<(String, Vec<Sentence>)>| -> Model {
        let dataset = concat_treebanks(treebanks).unwrap();
        let vocabs = TagVocabs::from_sentences(dataset.sentences.iter().map(|(s, _)| s));
        let config = ModelConfig {
            encoder: EncoderConfig {
                num_layers: 2,
                num_heads: 2,
                hidden_dim: 32,
                ff_dim: 64,
                max_positions: 64,
                vocab_size: vocab.len(),
                attention_dropout: 0.0,
                hidden_dropout: 0.0,
            },
            arc_dim: 64,
            tag_dim: 32,
        };
        let mut model = Model::new(config, vocab.clone(), vocabs, 13);
        let train_config = TrainConfig {
            base_lr: 2e-3,
            encoder_lr: 1e-3,
            warmup_steps: 60,
            batch_size: 16,
            epochs: 30,
            mask_prob: 0.0,
            label_smoothing: 0.0,
            dropout: 0.0,
            encoder_dropout: 0.0,
            layer_dropout: 0.0,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.99,
            grad_clip: 5.0,
            length_fuzz: 0.1,
            seed: 13,
        };
        train(&mut model, &dataset, &train_config, &TrainOptions::default()).unwrap();
        model
    };

    let las_of = |model: &Model, dev: &[Sentence]| -> f64 {
        let system: Vec<Sentence> = dev
            .iter()
            .map(|s| {
                let mut out = s.clone();
                model.annotate(&mut out);
                out
            })
            .collect();
        evaluate(dev, &system, EvalOptions::default())
            .unwrap()
            .las
            .fraction()
            .unwrap()
    };

    let model_a = build_and_train(vec![("A".to_string(), train_a.clone())]);
    let model_b = build_and_train(vec![("B".to_string(), train_b.clone())]);
    let joint = build_and_train(vec![
        ("A".to_string(), train_a),
        ("B".to_string(), train_b),
    ]);

    let separate_a = las_of(&model_a, &dev_a);
    let separate_b = las_of(&model_b, &dev_b);
    let joint_a = las_of(&joint, &dev_a);
    let joint_b = las_of(&joint, &dev_b);
    let elapsed = start.elapsed().as_secs_f64();

    let ok = separate_a > 0.0
        && separate_b > 0.0
        && joint_a >= 0.9 * separate_a
        && joint_b >= 0.9 * separate_b;
    criterion(
        8,
        "multilingual mixing",
        ok,
        &format!(
            "dev LAS A: separate {separate_a:.3} vs joint {joint_a:.3}; \
             B: separate {separate_b:.3} vs joint {joint_b:.3}; {elapsed:.0}s"
        ),
    );
}

// --------------------------------------------------------------------------
// 9. Evaluation exactness on constructed fixtures and identity runs.
// --------------------------------------------------------------------------

#[test]
fn criterion_09_evaluation_exactness() {
    let gold_text = "\
1\tThe\tthe\tDET\t_\tDefinite=Def\t2\tdet\t_\t_
2\tdog\tdog\tNOUN\t_\tNumber=Sing\t3\tnsubj\t_\t_
3\tbarks\tbark\tVERB\t_\tNumber=Sing\t0\troot\t_\t_
4\t.\t.\tPUNCT\t_\t_\t3\tpunct\t_\t_
";
    let gold = parse_document(gold_text).unwrap();
    let mut checks = Vec::new();

    // Fixture 1: identity.
    let r = evaluate(&gold, &gold, EvalOptions::default()).unwrap();
    checks.push(("identity", r.upos.fraction() == Some(1.0)
        && r.ufeats.fraction() == Some(1.0)
        && r.lemmas.fraction() == Some(1.0)
        && r.uas.fraction() == Some(1.0)
        && r.las.fraction() == Some(1.0)
        && r.clas == MetricCount { correct: 2, total: 2 }));

    // Fixture 2: 3 of 4 heads correct, 2 of those deprels correct.
    let system = parse_document(
        "1\tThe\tthe\tDET\t_\tDefinite=Def\t2\tamod\t_\t_
2\tdog\tdog\tNOUN\t_\tNumber=Sing\t3\tnsubj\t_\t_
3\tbarks\tbark\tVERB\t_\tNumber=Sing\t0\troot\t_\t_
4\t.\t.\tPUNCT\t_\t_\t2\tpunct\t_\t_
",
    )
    .unwrap();
    let r = evaluate(&gold, &system, EvalOptions::default()).unwrap();
    checks.push(("uas/las hand count", r.uas.fraction() == Some(0.75) && r.las.fraction() == Some(0.5)));

    // Fixture 3: errors confined to punctuation leave CLAS at 1.0.
    let system = parse_document(
        "1\tThe\tthe\tDET\t_\tDefinite=Def\t2\tdet\t_\t_
2\tdog\tdog\tNOUN\t_\tNumber=Sing\t3\tnsubj\t_\t_
3\tbarks\tbark\tVERB\t_\tNumber=Sing\t0\troot\t_\t_
4\t.\t.\tPUNCT\t_\t_\t1\tpunct\t_\t_
",
    )
    .unwrap();
    let r = evaluate(&gold, &system, EvalOptions::default()).unwrap();
    checks.push(("punct-only errors", r.clas.fraction() == Some(1.0) && r.las.fraction() == Some(0.75)));

    // Fixture 4: tagging columns counted independently.
    let system = parse_document(
        "1\tThe\ta\tDET\t_\tDefinite=Def\t2\tdet\t_\t_
2\tdog\tdog\tVERB\t_\tNumber=Plur\t3\tnsubj\t_\t_
3\tbarks\tbark\tVERB\t_\tNumber=Sing\t0\troot\t_\t_
4\t.\t,\tPUNCT\t_\t_\t3\tpunct\t_\t_
",
    )
    .unwrap();
    let r = evaluate(&gold, &system, EvalOptions::default()).unwrap();
    checks.push((
        "tagging hand count",
        r.upos == MetricCount { correct: 3, total: 4 }
            && r.ufeats == MetricCount { correct: 3, total: 4 }
            && r.lemmas == MetricCount { correct: 2, total: 4 }
            && r.uas.fraction() == Some(1.0),
    ));

    // Fixture 5: a content-word attachment error hits CLAS.
    let system = parse_document(
        "1\tThe\tthe\tDET\t_\tDefinite=Def\t2\tdet\t_\t_
2\tdog\tdog\tNOUN\t_\tNumber=Sing\t3\tobj\t_\t_
3\tbarks\tbark\tVERB\t_\tNumber=Sing\t0\troot\t_\t_
4\t.\t.\tPUNCT\t_\t_\t3\tpunct\t_\t_
",
    )
    .unwrap();
    let r = evaluate(&gold, &system, EvalOptions::default()).unwrap();
    checks.push((
        "content error hits clas",
        r.clas == MetricCount { correct: 1, total: 2 } && r.uas.fraction() == Some(1.0),
    ));

    // Fixture 6: subtype stripping behind the flag.
    let gold2 = parse_document(
        "1\tok\tok\tINTJ\t_\t_\t0\troot\t_\t_\n2\tthen\tthen\tADV\t_\t_\t1\tadvmod:emph\t_\t_\n",
    )
    .unwrap();
    let system2 = parse_document(
        "1\tok\tok\tINTJ\t_\t_\t0\troot\t_\t_\n2\tthen\tthen\tADV\t_\t_\t1\tadvmod\t_\t_\n",
    )
    .unwrap();
    let strict = evaluate(&gold2, &system2, EvalOptions::default()).unwrap();
    let lenient = evaluate(
        &gold2,
        &system2,
        EvalOptions {
            strip_deprel_subtypes: true,
        },
    )
    .unwrap();
    checks.push((
        "subtype flag",
        strict.las.fraction() == Some(0.5) && lenient.las.fraction() == Some(1.0),
    ));

    // Identity on every corpus sample.
    for name in SAMPLES {
        let doc = load_sample(name);
        let r = evaluate(&doc, &doc, EvalOptions::default()).unwrap();
        checks.push((
            "corpus identity",
            [r.upos, r.ufeats, r.lemmas, r.uas, r.las, r.clas]
                .iter()
                .all(|c| c.fraction() == Some(1.0)),
        ));
    }

    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    criterion(
        9,
        "evaluation exactness",
        failed.is_empty(),
        &format!("{} fixtures checked, failures: {failed:?}", checks.len()),
    );
}

// --------------------------------------------------------------------------
// 10. Window coverage, exhaustive at the reference setting.
// --------------------------------------------------------------------------

#[test]
fn criterion_10_windowing_coverage() {
    let mut bad = 0usize;
    for len in 1..=2000usize {
        let ids = vec![0u32; len];
        let spans = window_long_sequence(&ids, 512, 256).unwrap();
        let mut next = 0;
        let mut ok = true;
        for span in &spans {
            ok &= span.keep_from == next && span.keep_to > span.keep_from;
            ok &= span.keep_from >= span.start && span.keep_to <= span.end;
            ok &= span.end - span.start <= 512;
            next = span.keep_to;
        }
        ok &= next == len;
        if !ok {
            bad += 1;
        }
    }
    criterion(
        10,
        "windowing coverage",
        bad == 0,
        &format!("lengths 1..=2000 at (512, 256): {bad} non-partitions"),
    );
}

// --------------------------------------------------------------------------
// 11. Determinism: bit-identical checkpoints and logs for the same seed.
// --------------------------------------------------------------------------

#[test]
fn criterion_11_determinism() {
    let sentences: Vec<Sentence> = load_sample("en_toy-train.conllu")
        .into_iter()
        .take(20)
        .collect();
    let vocab = sample_vocab();

    let run = |dir: &std::path::Path| {
        let vocabs = TagVocabs::from_sentences(sentences.iter());
        let dataset =
            concat_treebanks(vec![("toy".to_string(), sentences.clone())]).unwrap();
        let config = ModelConfig {
            encoder: EncoderConfig {
                num_layers: 2,
                num_heads: 2,
                hidden_dim: 16,
                ff_dim: 32,
                max_positions: 64,
                vocab_size: vocab.len(),
                attention_dropout: 0.2,
                hidden_dropout: 0.2,
            },
            arc_dim: 16,
            tag_dim: 8,
        };
        let mut model = Model::new(config, vocab.clone(), vocabs, 13);
        // Full stochastic recipe on: masking, all dropouts, fuzzed batches.
        let train_config = TrainConfig {
            epochs: 3,
            batch_size: 8,
            warmup_steps: 10,
            ..TrainConfig::default()
        };
        train(
            &mut model,
            &dataset,
            &train_config,
            &TrainOptions {
                dev: Some(&sentences),
                out_dir: Some(dir),
                eval_every: 1,
            },
        )
        .unwrap();
    };

    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    run(dir_a.path());
    run(dir_b.path());

    let bytes = |p: PathBuf| fs::read(p).unwrap();
    let weights_equal = bytes(dir_a.path().join("last/weights.udk"))
        == bytes(dir_b.path().join("last/weights.udk"));
    let best_equal = bytes(dir_a.path().join("best/weights.udk"))
        == bytes(dir_b.path().join("best/weights.udk"));
    let logs_equal =
        bytes(dir_a.path().join("metrics.tsv")) == bytes(dir_b.path().join("metrics.tsv"));
    criterion(
        11,
        "determinism",
        weights_equal && best_equal && logs_equal,
        &format!(
            "last checkpoints identical: {weights_equal}; best identical: {best_equal}; logs identical: {logs_equal}"
        ),
    );
}
