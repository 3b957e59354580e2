//! Caption corruption strategies producing (corrupted input, target) pairs.
//!
//! Four strategies are implemented:
//!
//! * `mlm` — select ⌈ratio·words⌉ whole words; each selected word is masked
//!   80% of the time, replaced by random tokens 10%, left unchanged 10%.
//! * `full` — same word selection, but every selected word is masked.
//! * `mnem-decoder` — every named-entity span is masked independently with
//!   probability `p`, replacing each of its tokens by `[MASK]` in place; the
//!   target is the full original sequence.
//! * `mnem-sentinel` — each selected entity span collapses to one sentinel
//!   token; the target lists the spans in order, delimited by sentinels and
//!   closed by a terminal sentinel.
//!
//! All randomness comes from one `SplitMix64` stream per call with a fixed
//! draw order: span/word selection draws first, then fate draws (and random
//! replacement draws per subtoken) in span order. Seeds derive from
//! (global seed, sample id), so corpora can be masked by any worker layout
//! with identical results.

use serde::{Deserialize, Serialize};

use crate::corpus::{ContextualSample, Corpus, Source};
use crate::ner::{align_to_tokens, filter_labels, AnnotationSet, Field, LabelMode, MaskSpanSet};
use crate::rng::{derive_seed, SplitMix64};
use crate::tokenize::{encode, sentinel_id, word_groups, BpeVocab, MASK, N_BYTE_TOKENS, FIRST_LEARNED};
use crate::tokenize::TokenSeq;
use crate::{Error, Result};

pub const DEFAULT_MLM_RATIO: f64 = 0.15;
pub const DEFAULT_MNEM_P: f64 = 0.8;

/// Corruption strategy plus its parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "kebab-case")]
pub enum MaskStrategy {
    Mlm { ratio: f64 },
    Full { ratio: f64 },
    MnemDecoder { p: f64 },
    MnemSentinel { p: f64 },
}

impl MaskStrategy {
    pub fn mlm() -> Self {
        MaskStrategy::Mlm { ratio: DEFAULT_MLM_RATIO }
    }

    pub fn full() -> Self {
        MaskStrategy::Full { ratio: DEFAULT_MLM_RATIO }
    }

    pub fn mnem_decoder() -> Self {
        MaskStrategy::MnemDecoder { p: DEFAULT_MNEM_P }
    }

    pub fn mnem_sentinel() -> Self {
        MaskStrategy::MnemSentinel { p: DEFAULT_MNEM_P }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MaskStrategy::Mlm { .. } => "mlm",
            MaskStrategy::Full { .. } => "full",
            MaskStrategy::MnemDecoder { .. } => "mnem-decoder",
            MaskStrategy::MnemSentinel { .. } => "mnem-sentinel",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let value = match self {
            MaskStrategy::Mlm { ratio } | MaskStrategy::Full { ratio } => *ratio,
            MaskStrategy::MnemDecoder { p } | MaskStrategy::MnemSentinel { p } => *p,
        };
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::InvalidArgument(format!(
                "strategy parameter {value} outside [0, 1]"
            )));
        }
        Ok(())
    }
}

/// One corrupted training instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedInstance {
    pub input_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
    /// Token ranges of the original sequence that were selected for
    /// corruption, in order.
    pub masked_spans: Vec<(usize, usize)>,
    pub strategy: String,
    pub seed: u64,
}

/// Mask entity spans in place: every token of a selected span becomes
/// `[MASK]`; the target is the full original sequence. One Bernoulli(p) draw
/// per span, in span order.
pub fn mask_mnem_decoder(
    seq: &TokenSeq,
    entities: &MaskSpanSet,
    p: f64,
    seed: u64,
) -> MaskedInstance {
    let mut rng = SplitMix64::new(seed);
    let selected: Vec<(usize, usize)> = entities
        .spans()
        .iter()
        .copied()
        .filter(|_| rng.bernoulli(p))
        .collect();
    let mut input_ids = seq.ids.clone();
    for &(s, e) in &selected {
        for id in &mut input_ids[s..e] {
            *id = MASK;
        }
    }
    MaskedInstance {
        input_ids,
        target_ids: seq.ids.clone(),
        masked_spans: selected,
        strategy: "mnem-decoder".into(),
        seed,
    }
}

/// Replace the l-th selected span by the single token `SENT_l`; the target is
/// `SENT_0 ⊕ span_0 ⊕ SENT_1 ⊕ span_1 ⊕ … ⊕ SENT_L` with a terminal
/// sentinel. Zero selected spans yield the original input and the target
/// `[SENT_0]`. Selection draws match [`mask_mnem_decoder`] exactly.
pub fn mask_mnem_sentinel(
    seq: &TokenSeq,
    entities: &MaskSpanSet,
    p: f64,
    seed: u64,
) -> Result<MaskedInstance> {
    let mut rng = SplitMix64::new(seed);
    let selected: Vec<(usize, usize)> = entities
        .spans()
        .iter()
        .copied()
        .filter(|_| rng.bernoulli(p))
        .collect();
    // The terminal sentinel needs one id beyond the last span's.
    sentinel_id(selected.len() as u32)?;

    let mut input_ids = Vec::with_capacity(seq.ids.len());
    let mut target_ids = Vec::new();
    let mut cursor = 0;
    for (l, &(s, e)) in selected.iter().enumerate() {
        input_ids.extend_from_slice(&seq.ids[cursor..s]);
        let sent = sentinel_id(l as u32).expect("within budget");
        input_ids.push(sent);
        target_ids.push(sent);
        target_ids.extend_from_slice(&seq.ids[s..e]);
        cursor = e;
    }
    input_ids.extend_from_slice(&seq.ids[cursor..]);
    target_ids.push(sentinel_id(selected.len() as u32).expect("within budget"));
    Ok(MaskedInstance {
        input_ids,
        target_ids,
        masked_spans: selected,
        strategy: "mnem-sentinel".into(),
        seed,
    })
}

/// Select ⌈ratio·n_words⌉ whole words without replacement (partial
/// Fisher-Yates over word indices), then draw one fate per selected word in
/// word order: u < 0.8 masks every subtoken, u < 0.9 redraws each subtoken
/// uniformly from the non-special pool, otherwise the word stays unchanged.
pub fn mask_mlm(vocab: &BpeVocab, seq: &TokenSeq, ratio: f64, seed: u64) -> MaskedInstance {
    let mut rng = SplitMix64::new(seed);
    let words = word_groups(seq);
    let selected = select_words(&mut rng, words.len(), ratio);

    let mut input_ids = seq.ids.clone();
    let mut masked_spans = Vec::with_capacity(selected.len());
    let pool_len = N_BYTE_TOKENS as usize + vocab.merges().len();
    for &w in &selected {
        let (s, e) = words[w];
        masked_spans.push((s, e));
        let fate = rng.next_f64();
        if fate < 0.8 {
            for id in &mut input_ids[s..e] {
                *id = MASK;
            }
        } else if fate < 0.9 {
            for id in &mut input_ids[s..e] {
                let idx = rng.below(pool_len);
                // pool order: byte tokens first, then learned merges
                *id = if idx < N_BYTE_TOKENS as usize {
                    idx as u32
                } else {
                    FIRST_LEARNED + (idx - N_BYTE_TOKENS as usize) as u32
                };
            }
        }
        // else: unchanged
    }
    MaskedInstance {
        input_ids,
        target_ids: seq.ids.clone(),
        masked_spans,
        strategy: "mlm".into(),
        seed,
    }
}

/// Same word selection as [`mask_mlm`] under the same seed (the selection
/// draws come first in the stream), but every selected word is masked.
pub fn mask_full(seq: &TokenSeq, ratio: f64, seed: u64) -> MaskedInstance {
    let mut rng = SplitMix64::new(seed);
    let words = word_groups(seq);
    let selected = select_words(&mut rng, words.len(), ratio);
    let mut input_ids = seq.ids.clone();
    let mut masked_spans = Vec::with_capacity(selected.len());
    for &w in &selected {
        let (s, e) = words[w];
        masked_spans.push((s, e));
        for id in &mut input_ids[s..e] {
            *id = MASK;
        }
    }
    MaskedInstance {
        input_ids,
        target_ids: seq.ids.clone(),
        masked_spans,
        strategy: "full".into(),
        seed,
    }
}

/// Uniform sample of ⌈ratio·n⌉ distinct word indices, returned sorted.
/// Consumes exactly ⌈ratio·n⌉ `below` draws.
fn select_words(rng: &mut SplitMix64, n_words: usize, ratio: f64) -> Vec<usize> {
    let k = ((ratio * n_words as f64).ceil() as usize).min(n_words);
    let mut indices: Vec<usize> = (0..n_words).collect();
    for i in 0..k {
        let j = i + rng.below(n_words - i);
        indices.swap(i, j);
    }
    let mut selected = indices[..k].to_vec();
    selected.sort_unstable();
    selected
}

/// Everything the trainer needs for one sample: uncorrupted context token
/// sequences plus the corrupted caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub sample_id: String,
    pub section_ids: Vec<u32>,
    pub description_ids: Vec<u32>,
    pub image_feature_id: Option<String>,
    pub masked: MaskedInstance,
}

pub fn label_mode_for(source: Source) -> LabelMode {
    match source {
        Source::News => LabelMode::News,
        Source::Wiki | Source::Synthetic => LabelMode::Wiki,
    }
}

/// Corrupt one sample's caption under `strategy`. Entities come from the
/// annotation sidecar, filtered by the sample's domain mode and aligned to
/// whole-word token ranges. The per-sample seed is
/// `derive_seed(global_seed, sample.id)`.
pub fn build_training_pair(
    vocab: &BpeVocab,
    sample: &ContextualSample,
    strategy: MaskStrategy,
    annotations: &AnnotationSet,
    global_seed: u64,
) -> Result<TrainingPair> {
    strategy.validate()?;
    let seed = derive_seed(global_seed, &sample.id);
    let caption_seq = encode(vocab, &sample.caption);
    let masked = match strategy {
        MaskStrategy::Mlm { ratio } => mask_mlm(vocab, &caption_seq, ratio, seed),
        MaskStrategy::Full { ratio } => mask_full(&caption_seq, ratio, seed),
        MaskStrategy::MnemDecoder { p } | MaskStrategy::MnemSentinel { p } => {
            let spans = annotations.resolved_spans(&sample.id, Field::Caption, &sample.caption)?;
            let spans = filter_labels(spans, label_mode_for(sample.source));
            let aligned = align_to_tokens(&spans, &caption_seq)?;
            match strategy {
                MaskStrategy::MnemDecoder { .. } => {
                    mask_mnem_decoder(&caption_seq, &aligned, p, seed)
                }
                _ => mask_mnem_sentinel(&caption_seq, &aligned, p, seed)?,
            }
        }
    };
    Ok(TrainingPair {
        sample_id: sample.id.clone(),
        section_ids: encode(vocab, &sample.section).ids,
        description_ids: encode(vocab, &sample.description).ids,
        image_feature_id: sample.image_feature_id.clone(),
        masked,
    })
}

/// Mask a whole corpus. `n_threads` only shards the work: per-sample seeds
/// make the output identical for every worker layout, and shards are merged
/// in input order.
pub fn mask_corpus(
    vocab: &BpeVocab,
    corpus: &Corpus,
    annotations: &AnnotationSet,
    strategy: MaskStrategy,
    global_seed: u64,
    n_threads: usize,
) -> Result<Vec<TrainingPair>> {
    let n_threads = n_threads.max(1).min(corpus.len().max(1));
    if n_threads == 1 {
        return corpus
            .samples
            .iter()
            .map(|s| build_training_pair(vocab, s, strategy, annotations, global_seed))
            .collect();
    }
    let chunk = corpus.len().div_ceil(n_threads);
    let chunks: Vec<&[ContextualSample]> = corpus.samples.chunks(chunk).collect();
    let results: Vec<Result<Vec<TrainingPair>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|shard| {
                scope.spawn(move || {
                    shard
                        .iter()
                        .map(|s| build_training_pair(vocab, s, strategy, annotations, global_seed))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("masking worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(corpus.len());
    for shard in results {
        out.extend(shard?);
    }
    Ok(out)
}

/// JSONL record for masked datasets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskedRecord {
    pub sample_id: String,
    pub strategy: String,
    pub input_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
    pub masked_spans: Vec<(usize, usize)>,
    pub seed: u64,
}

impl From<&TrainingPair> for MaskedRecord {
    fn from(pair: &TrainingPair) -> Self {
        MaskedRecord {
            sample_id: pair.sample_id.clone(),
            strategy: pair.masked.strategy.clone(),
            input_ids: pair.masked.input_ids.clone(),
            target_ids: pair.masked.target_ids.clone(),
            masked_spans: pair.masked.masked_spans.clone(),
            seed: pair.masked.seed,
        }
    }
}

pub fn write_masked_jsonl(pairs: &[TrainingPair], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for pair in pairs {
        let record = MaskedRecord::from(pair);
        serde_json::to_writer(&mut w, &record).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
