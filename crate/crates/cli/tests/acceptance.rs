//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its measurements. Criteria 6 and 7 share a single experiment run.

use std::collections::HashMap;
use std::sync::OnceLock;
use std::time::Instant;

use mnemcap_cli::experiment::{run_experiment, ExperimentConfig, ExperimentReport, StrategySummary};
use mnemcap_core::mask::{
    mask_full, mask_mlm, mask_mnem_decoder, mask_mnem_sentinel, MaskStrategy,
};
use mnemcap_core::metrics::{bleu4, cider_d, metric_tokens, rouge_l, IdfTable};
use mnemcap_core::ner::MaskSpanSet;
use mnemcap_core::rng::SplitMix64;
use mnemcap_core::split::{assign, jaccard, word_set, ContextMode, SubsetLabel};
use mnemcap_core::synth::{self, SynthConfig};
use mnemcap_core::tokenize::{
    decode, encode, train_bpe, word_groups, BpeVocab, MASK, SENT_BASE,
};
use mnemcap_core::corpus::{ContextualSample, Corpus, Source};
use mnemcap_testutil::oracle;

fn pass(criterion: &str, detail: String) {
    println!("criterion {criterion}: PASS — {detail}");
}

// --- criterion 1: metric oracle equivalence -------------------------------------

#[test]
fn criterion_1_metric_oracle_equivalence() {
    let started = Instant::now();
    let pairs = oracle::caption_fixture(50, 2024);
    let cands: Vec<Vec<String>> = pairs.iter().map(|(c, _)| metric_tokens(c)).collect();
    let refs: Vec<Vec<String>> = pairs.iter().map(|(_, r)| metric_tokens(r)).collect();
    let idf = IdfTable::build(&refs);

    for smooth in [false, true] {
        let ours = bleu4(&cands, &refs, smooth).unwrap();
        let oracle_score = oracle::bleu4(&pairs, smooth);
        assert!(
            (ours - oracle_score).abs() < 1e-6,
            "bleu4 smooth={smooth}: {ours} vs oracle {oracle_score}"
        );
    }
    let ours_rouge = rouge_l(&cands, &refs).unwrap();
    let oracle_rouge = oracle::rouge_l(&pairs);
    assert!((ours_rouge - oracle_rouge).abs() < 1e-6, "{ours_rouge} vs {oracle_rouge}");
    let ours_cider = cider_d(&cands, &refs, &idf).unwrap();
    let oracle_cider = oracle::cider_d(&pairs);
    assert!((ours_cider - oracle_cider).abs() < 1e-6, "{ours_cider} vs {oracle_cider}");

    // identity pairs in a multi-document corpus with unique n-grams
    let texts = [
        "red boats moor in the old harbor tonight",
        "snow falls over quiet rooftops at dusk today",
        "a festival parade crosses the stone bridge slowly",
        "lanterns drift along the dark canal water",
        "the museum garden opens before the spring crowds",
    ];
    let identity: Vec<Vec<String>> = texts.iter().map(|t| metric_tokens(t)).collect();
    let id_idf = IdfTable::build(&identity);
    assert_eq!(bleu4(&identity, &identity, false).unwrap(), 1.0);
    assert_eq!(rouge_l(&identity, &identity).unwrap(), 1.0);
    for reference in &identity {
        let per_pair =
            mnemcap_core::metrics::cider_d_pair(reference, reference, &id_idf);
        assert!((per_pair - 10.0).abs() < 1e-9, "per-pair CIDEr-D {per_pair}");
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 10, "criterion 1 took {elapsed:?}");
    pass("1", format!("BLEU/ROUGE/CIDEr match brute-force oracle to 1e-6 on 50 pairs; identity scores exact ({elapsed:?})"));
}

// --- criterion 2: masking distributions ------------------------------------------

#[test]
fn criterion_2_masking_distributions() {
    let started = Instant::now();
    let vocab = BpeVocab::from_merges(vec![]).unwrap();
    // 10 single-word entities per fixture
    let text = (0..10).map(|_| "entity").collect::<Vec<_>>().join(" ");
    let seq = encode(&vocab, &text);
    let spans = MaskSpanSet::new(word_groups(&seq)).unwrap();

    let mut masked_spans = 0u64;
    let mut total_spans = 0u64;
    for seed in 0..2_500u64 {
        let out = mask_mnem_decoder(&seq, &spans, 0.8, seed);
        masked_spans += out.masked_spans.len() as u64;
        total_spans += spans.len() as u64;
    }
    assert!(total_spans >= 20_000);
    let rate = masked_spans as f64 / total_spans as f64;
    assert!((rate - 0.80).abs() < 0.01, "MNEM mask rate {rate}");

    // MLM fates over >= 20k selected words
    let mlm_text = "abcdefgh ijklmnop qrstuvwx yzabcdef ghijklmn";
    let mlm_seq = encode(&vocab, mlm_text);
    let mut fates = [0u64; 3]; // mask, random, unchanged
    let mut selected_total = 0u64;
    for seed in 0..4_500u64 {
        let out = mask_mlm(&vocab, &mlm_seq, 1.0, seed);
        for &(s, e) in &out.masked_spans {
            selected_total += 1;
            let slice = &out.input_ids[s..e];
            if slice.iter().all(|&id| id == MASK) {
                fates[0] += 1;
            } else if slice == &mlm_seq.ids[s..e] {
                fates[2] += 1;
            } else {
                fates[1] += 1;
            }
        }
    }
    assert!(selected_total >= 20_000);
    let f = |c: u64| c as f64 / selected_total as f64;
    assert!((f(fates[0]) - 0.80).abs() < 0.01, "mask fate {}", f(fates[0]));
    assert!((f(fates[1]) - 0.10).abs() < 0.01, "random fate {}", f(fates[1]));
    assert!((f(fates[2]) - 0.10).abs() < 0.01, "unchanged fate {}", f(fates[2]));

    // Full masking corrupts every selected word
    for seed in 0..200 {
        let out = mask_full(&mlm_seq, 0.6, seed);
        for &(s, e) in &out.masked_spans {
            assert!(out.input_ids[s..e].iter().all(|&id| id == MASK));
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 30, "criterion 2 took {elapsed:?}");
    pass("2", format!(
        "MNEM rate {rate:.4} (target 0.80±0.01); MLM fates {:.4}/{:.4}/{:.4}; full masking 100% ({elapsed:?})",
        f(fates[0]), f(fates[1]), f(fates[2])
    ));
}

// --- criterion 3: structural masking invariants -----------------------------------

#[test]
fn criterion_3_structural_invariants() {
    let vocab = BpeVocab::from_merges(vec![]).unwrap();
    let mut rng = SplitMix64::new(99);
    let mut violations = 0u64;
    for case in 0..10_000u64 {
        // random multi-word text
        let n_words = 2 + rng.below(12);
        let words: Vec<String> = (0..n_words)
            .map(|_| {
                let len = 1 + rng.below(6);
                (0..len).map(|_| (b'a' + rng.below(26) as u8) as char).collect()
            })
            .collect();
        let text = words.join(" ");
        let seq = encode(&vocab, &text);
        let groups = word_groups(&seq);
        // random subset of words as entity spans
        let spans: Vec<(usize, usize)> = groups
            .iter()
            .copied()
            .filter(|_| rng.bernoulli(0.4))
            .collect();
        let span_set = MaskSpanSet::new(spans.clone()).unwrap();

        let dec = mask_mnem_decoder(&seq, &span_set, 0.7, case);
        // outside any entity span the input must equal the original
        for (idx, (&inp, &orig)) in dec.input_ids.iter().zip(&seq.ids).enumerate() {
            let inside = spans.iter().any(|&(s, e)| (s..e).contains(&idx));
            if !inside && inp != orig {
                violations += 1;
            }
        }
        for w in dec.masked_spans.windows(2) {
            if w[0].1 > w[1].0 {
                violations += 1; // max(M_l) < min(M_{l+1}) broken
            }
        }

        let sent = mask_mnem_sentinel(&seq, &span_set, 0.7, case).unwrap();
        let sentinels: Vec<u32> = sent
            .input_ids
            .iter()
            .copied()
            .filter(|&id| (SENT_BASE..SENT_BASE + 100).contains(&id))
            .collect();
        for (l, &id) in sentinels.iter().enumerate() {
            if id != SENT_BASE + l as u32 {
                violations += 1; // sentinels must be SENT_0..SENT_{L-1} in order
            }
        }
        for w in sent.masked_spans.windows(2) {
            if w[0].1 > w[1].0 {
                violations += 1;
            }
        }
    }
    assert_eq!(violations, 0, "structural masking violations");
    pass("3", "10,000 random fixtures, zero violations of span bounds, sentinel order, and span ordering".into());
}

// --- criterion 4: tokenizer roundtrip ---------------------------------------------

#[test]
fn criterion_4_tokenizer_roundtrip() {
    let output = synth::generate(&SynthConfig { n_samples: 200, ..Default::default() }).unwrap();
    let texts: Vec<String> = output
        .corpus
        .samples
        .iter()
        .flat_map(|s| [s.caption.clone(), s.section.clone(), s.description.clone()])
        .collect();
    let vocab = train_bpe(texts.iter().map(|s| s.as_str()), 512).unwrap();

    let mut exact = 0usize;
    // 1000 random UTF-8 strings over a wide codepoint mix
    let mut rng = SplitMix64::new(4242);
    let alphabet: Vec<char> = ('a'..='z')
        .chain('A'..='Z')
        .chain("0123456789 \t\n.,!?'ß€éü中日ø—🙂".chars())
        .collect();
    for _ in 0..1000 {
        let len = rng.below(60);
        let text: String = (0..len).map(|_| alphabet[rng.below(alphabet.len())]).collect();
        let seq = encode(&vocab, &text);
        if decode(&vocab, &seq.ids, false).unwrap() == text {
            exact += 1;
        }
    }
    assert_eq!(exact, 1000, "roundtrip failures on random strings");
    for text in &texts {
        let seq = encode(&vocab, text);
        assert_eq!(&decode(&vocab, &seq.ids, false).unwrap(), text);
    }
    pass("4", format!("1000 random strings + {} corpus fields roundtrip exactly", texts.len()));
}

// --- criterion 5: Jaccard/split correctness ---------------------------------------

#[test]
fn criterion_5_jaccard_split_fixture() {
    // 20 hand-labeled samples. Caption words are {s1..sk} ∪ {c1..cm}; the
    // description holds {s1..sk} ∪ {d1..dn}; J = k / (k + m + n).
    // (shared, caption-only, context-only, expected-easy)
    let cases: [(usize, usize, usize); 20] = [
        (3, 1, 1),  // 3/5 = 0.6  easy
        (1, 1, 2),  // 1/4        hard
        (2, 1, 1),  // 2/4 = 0.5  boundary → hard
        (5, 1, 1),  // 5/7        easy
        (0, 3, 3),  // 0          hard
        (4, 1, 2),  // 4/7        easy
        (1, 4, 4),  // 1/9        hard
        (6, 2, 3),  // 6/11       easy
        (2, 3, 3),  // 2/8        hard
        (3, 2, 1),  // 3/6 = 0.5  boundary → hard
        (7, 1, 1),  // 7/9        easy
        (2, 2, 2),  // 2/6        hard
        (5, 2, 2),  // 5/9        easy
        (1, 1, 1),  // 1/3        hard
        (4, 3, 3),  // 4/10       hard
        (8, 1, 2),  // 8/11       easy
        (3, 3, 2),  // 3/8        hard
        (6, 1, 4),  // 6/11       easy
        (2, 5, 1),  // 2/8        hard
        (9, 2, 2),  // 9/13       easy
    ];
    let mut samples = Vec::new();
    let mut expected = Vec::new();
    for (i, &(k, m, n)) in cases.iter().enumerate() {
        let shared: Vec<String> = (0..k).map(|j| format!("s{i}x{j}")).collect();
        let cap_only: Vec<String> = (0..m).map(|j| format!("c{i}x{j}")).collect();
        let ctx_only: Vec<String> = (0..n).map(|j| format!("d{i}x{j}")).collect();
        let caption = shared.iter().chain(&cap_only).cloned().collect::<Vec<_>>().join(" ");
        let description = shared.iter().chain(&ctx_only).cloned().collect::<Vec<_>>().join(" ");
        samples.push(ContextualSample {
            id: format!("fix-{i}"),
            page_title: String::new(),
            caption,
            section: String::new(),
            description,
            image_feature_id: None,
            source: Source::Wiki,
        });
        let score = k as f64 / (k + m + n) as f64;
        expected.push((score, score > 0.5));
    }
    let corpus = Corpus { samples };
    let records = assign(&corpus, ContextMode::Description, 0.5);
    for (record, &(score, easy)) in records.iter().zip(&expected) {
        assert_eq!(record.score, score, "sample {}", record.sample_id);
        assert_eq!(record.label == SubsetLabel::Easy, easy, "sample {}", record.sample_id);
    }
    // direct boundary check: J exactly 0.5 is Hard
    let a = word_set("p q");
    let b = word_set("p q r s");
    assert_eq!(jaccard(&a, &b), 0.5);
    assert_eq!(records[2].label, SubsetLabel::Hard);
    assert_eq!(records[9].label, SubsetLabel::Hard);
    pass("5", "20-sample fixture matches manual set enumeration exactly; J = 0.5 labels Hard".into());
}

// --- criteria 6 & 7: the MNEM effect and the Easy/Hard gap -------------------------

static EXPERIMENT: OnceLock<ExperimentReport> = OnceLock::new();

fn experiment_report() -> &'static ExperimentReport {
    EXPERIMENT.get_or_init(|| {
        let config = ExperimentConfig {
            strategies: vec!["none".into(), "mlm".into(), "mnem-decoder".into()],
            threads: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(4),
            ..Default::default()
        };
        run_experiment(&config).expect("experiment run")
    })
}

fn summary<'a>(report: &'a ExperimentReport, strategy: &str) -> &'a StrategySummary {
    report
        .summaries
        .iter()
        .find(|s| s.strategy == strategy)
        .unwrap_or_else(|| panic!("missing summary for {strategy}"))
}

#[test]
fn criterion_6_mnem_effect_directional() {
    let started = Instant::now();
    let report = experiment_report();
    for run in &report.runs {
        assert!(run.ok, "run {}/{} failed: {:?}", run.strategy, run.seed, run.error);
    }
    let none = summary(report, "none");
    let mlm = summary(report, "mlm");
    let mnem = summary(report, "mnem-decoder");
    assert!(
        mnem.ne_recall > mlm.ne_recall,
        "median NE recall: MNEM {} must exceed MLM {}",
        mnem.ne_recall,
        mlm.ne_recall
    );
    assert!(
        mlm.ne_recall >= none.ne_recall,
        "median NE recall: MLM {} must be >= no-pretrain {}",
        mlm.ne_recall,
        none.ne_recall
    );
    assert!(
        mnem.cider_d >= mlm.cider_d,
        "median CIDEr-D: MNEM {} must be >= MLM {}",
        mnem.cider_d,
        mlm.cider_d
    );
    assert!(
        mnem.ne_recall > mnem.ne_recall_no_image,
        "image effect: with-image NE recall {} must exceed without-image {}",
        mnem.ne_recall,
        mnem.ne_recall_no_image
    );
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() <= 30 * 60, "criterion 6 took {elapsed:?}");
    pass("6", format!(
        "NE recall medians none/mlm/mnem = {:.4}/{:.4}/{:.4}; CIDEr-D mlm/mnem = {:.4}/{:.4}; mnem image ablation {:.4} -> {:.4} ({elapsed:?})",
        none.ne_recall, mlm.ne_recall, mnem.ne_recall, mlm.cider_d, mnem.cider_d,
        mnem.ne_recall_no_image, mnem.ne_recall
    ));
}

#[test]
fn criterion_7_easy_hard_gap() {
    let report = experiment_report();
    let mnem = summary(report, "mnem-decoder");
    assert!(
        mnem.easy_cider_d > mnem.hard_cider_d,
        "Easy CIDEr-D {} must exceed Hard {}",
        mnem.easy_cider_d,
        mnem.hard_cider_d
    );
    assert!(
        mnem.hard_gen_overlap > mnem.hard_gt_overlap,
        "copy shortcut: generated overlap {} must exceed ground-truth overlap {} on Hard",
        mnem.hard_gen_overlap,
        mnem.hard_gt_overlap
    );
    pass("7", format!(
        "Easy/Hard CIDEr-D {:.4}/{:.4}; Hard Gen-ol {:.4} > GT-ol {:.4}",
        mnem.easy_cider_d, mnem.hard_cider_d, mnem.hard_gen_overlap, mnem.hard_gt_overlap
    ));
}

// --- criterion 8: gradient correctness ---------------------------------------------

#[test]
fn criterion_8_gradient_correctness() {
    use mnemcap_model::gradcheck::grad_check;
    use mnemcap_model::{Arch, BlockKind};
    let started = Instant::now();
    let mut worst = 0.0f64;
    for arch in [Arch::DecoderPrefix, Arch::EncoderDecoder] {
        for block in [BlockKind::DynamicConv, BlockKind::SelfAttn] {
            let report = grad_check(arch, block, 11).unwrap();
            assert!(
                report.max_rel_err < 1e-3,
                "{arch:?}/{block:?} max rel err {}",
                report.max_rel_err
            );
            worst = worst.max(report.max_rel_err);
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 120, "criterion 8 took {elapsed:?}");
    pass("8", format!("worst max relative error {worst:.3e} across both architectures and blocks ({elapsed:?})"));
}

// --- criterion 9: determinism and throughput -----------------------------------------

#[test]
fn criterion_9_determinism_and_throughput() {
    use mnemcap_core::mask::mask_corpus;

    let output = synth::generate(&SynthConfig { n_samples: 600, ..Default::default() }).unwrap();
    let texts: Vec<String> = output
        .corpus
        .samples
        .iter()
        .flat_map(|s| [s.caption.clone(), s.section.clone(), s.description.clone()])
        .collect();
    let vocab = train_bpe(texts.iter().map(|s| s.as_str()), 512).unwrap();
    let strategy = MaskStrategy::mnem_decoder();

    // identical bytes for every worker layout
    let reference =
        mask_corpus(&vocab, &output.corpus, &output.annotations, strategy, 7, 1).unwrap();
    let to_bytes = |pairs: &[mnemcap_core::mask::TrainingPair]| -> Vec<u8> {
        let mut bytes = Vec::new();
        for pair in pairs {
            let record = mnemcap_core::mask::MaskedRecord::from(pair);
            bytes.extend(serde_json::to_vec(&record).unwrap());
            bytes.push(b'\n');
        }
        bytes
    };
    let reference_bytes = to_bytes(&reference);
    for threads in [2, 3, 8] {
        let other =
            mask_corpus(&vocab, &output.corpus, &output.annotations, strategy, 7, threads).unwrap();
        assert_eq!(reference_bytes, to_bytes(&other), "thread count {threads} changed bytes");
    }

    // identical reports across repeated evaluation
    let generated: HashMap<String, String> = output
        .corpus
        .samples
        .iter()
        .map(|s| (s.id.clone(), s.caption.clone()))
        .collect();
    let records = assign(&output.corpus, ContextMode::Wiki, 0.5);
    let gaz = output.inventory.gazetteer();
    let report_a = mnemcap_core::metrics::evaluate(
        &generated, &output.corpus, Some(&gaz), Some(&records), true,
    )
    .unwrap();
    let report_b = mnemcap_core::metrics::evaluate(
        &generated, &output.corpus, Some(&gaz), Some(&records), true,
    )
    .unwrap();
    assert_eq!(
        serde_json::to_vec(&report_a).unwrap(),
        serde_json::to_vec(&report_b).unwrap()
    );

    // single-core tokenization + masking throughput
    let captions: Vec<&str> = output.corpus.samples.iter().map(|s| s.caption.as_str()).collect();
    let spans_per_caption: Vec<MaskSpanSet> = output
        .corpus
        .samples
        .iter()
        .map(|s| {
            let seq = encode(&vocab, &s.caption);
            let resolved = output
                .annotations
                .resolved_spans(&s.id, mnemcap_core::ner::Field::Caption, &s.caption)
                .unwrap();
            mnemcap_core::ner::align_to_tokens(&resolved, &seq).unwrap()
        })
        .collect();
    let started = Instant::now();
    let mut processed = 0u64;
    let mut sink = 0u64;
    while started.elapsed().as_millis() < 500 {
        for (caption, spans) in captions.iter().zip(&spans_per_caption) {
            let seq = encode(&vocab, caption);
            let out = mask_mnem_decoder(&seq, spans, 0.8, processed);
            sink = sink.wrapping_add(out.input_ids.len() as u64);
            processed += 1;
        }
    }
    let rate = processed as f64 / started.elapsed().as_secs_f64();
    assert!(sink > 0);
    assert!(rate >= 5_000.0, "tokenize+mask throughput {rate:.0}/s");
    pass("9", format!(
        "masked datasets byte-identical across 1/2/3/8 workers; reports reproducible; throughput {rate:.0} captions/s"
    ));
}
