//! Subcommand implementations. Each command resolves its configuration
//! (defaults < TOML config file < explicit flags), runs one pipeline stage,
//! and writes a run manifest next to its primary output.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use mnemcap_core::corpus::{
    self, Corpus, FeatureStore, FieldMap, Source,
};
use mnemcap_core::mask::{self, MaskStrategy, TrainingPair};
use mnemcap_core::metrics;
use mnemcap_core::ner::{self, AnnotationRecord, AnnotationSet, Field, Gazetteer, RawSpan};
use mnemcap_core::split::{self, ContextMode, JaccardRecord};
use mnemcap_core::synth::{self, SynthConfig};
use mnemcap_core::tokenize::{self, BpeVocab};
use mnemcap_core::{Error, Result};
use mnemcap_model::checkpoint::{load_checkpoint, save_checkpoint};
use mnemcap_model::train::{train, TrainConfig, TrainItem};
use mnemcap_model::{
    clean_instance, Arch, BlockKind, ContextInput, DecodeMode, Model, ModelConfig, ModelParams,
};
use serde::{Deserialize, Serialize};

use crate::args::*;
use crate::manifest::{manifest_path_for, ManifestBuilder};

pub fn with_path(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| with_path(e, path))
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let report = corpus::ingest_jsonl(path, &FieldMap::default())
        .map_err(|e| match e {
            Error::Io(io) => with_path(io, path),
            other => other,
        })?;
    if let Some(reject) = report.rejects.first() {
        return Err(Error::Format(format!(
            "{}: line {}: {}",
            path.display(),
            reject.line_no,
            reject.reason
        )));
    }
    Ok(report.corpus)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, json).map_err(|e| with_path(e, path))?;
    Ok(())
}

pub fn parse_strategy(name: &str, p: f64, ratio: f64) -> Result<MaskStrategy> {
    let strategy = match name {
        "mlm" => MaskStrategy::Mlm { ratio },
        "full" => MaskStrategy::Full { ratio },
        "mnem-decoder" => MaskStrategy::MnemDecoder { p },
        "mnem-sentinel" => MaskStrategy::MnemSentinel { p },
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown strategy `{other}` (expected mnem-decoder|mnem-sentinel|mlm|full)"
            )))
        }
    };
    strategy.validate()?;
    Ok(strategy)
}

// --- ingest -------------------------------------------------------------------

pub fn run_ingest(args: &IngestArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("ingest", serde_json::json!({
        "field_map": args.field_map,
        "min_caption_words": args.min_caption_words,
        "min_section_words": args.min_section_words,
        "dedup": !args.no_dedup,
        "source": args.source,
    }));
    manifest.input(&args.input);
    let mut field_map = match args.field_map.as_str() {
        "identity" => FieldMap::default(),
        "wit" => FieldMap::wit(),
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown field map `{other}` (expected identity|wit)"
            )))
        }
    };
    field_map.default_source = args.source.parse::<Source>()?;
    let report = corpus::ingest_jsonl(&args.input, &field_map)
        .map_err(|e| match e {
            Error::Io(io) => with_path(io, &args.input),
            other => other,
        })?;
    let (filtered, counts) =
        corpus::filter_corpus(&report.corpus, args.min_caption_words, args.min_section_words);
    let final_corpus = if args.no_dedup { filtered } else { corpus::dedup(&filtered) };
    corpus::export_jsonl(&final_corpus, &args.out)?;
    manifest.output(&args.out);
    if let Some(rejects_path) = &args.rejects {
        corpus::write_rejects(&report.rejects, rejects_path)?;
        manifest.output(rejects_path);
    }
    manifest.write(&manifest_path_for(&args.out))?;
    let summary = serde_json::json!({
        "ingested": report.corpus.len(),
        "rejected_lines": report.rejects.len(),
        "filter": counts,
        "written": final_corpus.len(),
    });
    println!("{}", serde_json::to_string_pretty(&summary).unwrap());
    Ok(())
}

// --- stats --------------------------------------------------------------------

pub fn run_stats(args: &StatsArgs) -> Result<()> {
    let corpus = read_corpus(&args.corpus)?;
    let annotations = match &args.annotations {
        Some(path) => {
            let (set, rejects) = ner::load_annotations(path).map_err(|e| match e {
                Error::Io(io) => with_path(io, path),
                other => other,
            })?;
            if !rejects.is_empty() {
                eprintln!("warning: {} annotation records rejected", rejects.len());
            }
            set
        }
        None => AnnotationSet::default(),
    };
    let stats = corpus::compute_stats(&corpus, &annotations);
    let json = serde_json::to_string_pretty(&stats).map_err(|e| Error::Format(e.to_string()))?;
    println!("{json}");
    if let Some(out) = &args.out {
        let mut manifest = ManifestBuilder::new("stats", serde_json::json!({}));
        manifest.input(&args.corpus);
        std::fs::write(out, &json).map_err(|e| with_path(e, out))?;
        manifest.output(out);
        manifest.write(&manifest_path_for(out))?;
    }
    Ok(())
}

// --- annotate -----------------------------------------------------------------

fn byte_to_char(text: &str, byte: usize) -> usize {
    text[..byte].chars().count()
}

pub fn run_annotate(args: &AnnotateArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("annotate", serde_json::json!({}));
    manifest.input(&args.corpus).input(&args.gazetteer);
    let corpus = read_corpus(&args.corpus)?;
    let gazetteer = ner::load_gazetteer(&args.gazetteer).map_err(|e| match e {
        Error::Io(io) => with_path(io, &args.gazetteer),
        other => other,
    })?;
    let mut set = AnnotationSet::default();
    for sample in &corpus.samples {
        for (field, text) in [
            (Field::Caption, &sample.caption),
            (Field::Section, &sample.section),
            (Field::Description, &sample.description),
        ] {
            let spans: Vec<RawSpan> = ner::tag_heuristic(text, &gazetteer)
                .into_iter()
                .map(|s| RawSpan {
                    start: byte_to_char(text, s.start),
                    end: byte_to_char(text, s.end),
                    label: s.label,
                })
                .collect();
            if !spans.is_empty() {
                set.add_record(AnnotationRecord {
                    sample_id: sample.id.clone(),
                    field,
                    spans,
                })?;
            }
        }
    }
    ner::save_annotations(&set, &args.out)?;
    manifest.output(&args.out);
    manifest.write(&manifest_path_for(&args.out))?;
    println!("annotated {} (sample, field) records", set.len());
    Ok(())
}

// --- tokenize -----------------------------------------------------------------

pub fn run_tokenize_train(args: &TokenizeTrainArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("tokenize train", serde_json::json!({
        "vocab_size": args.vocab_size,
    }));
    manifest.input(&args.input);
    let corpus = read_corpus(&args.input)?;
    let texts: Vec<String> = corpus
        .samples
        .iter()
        .flat_map(|s| [s.caption.clone(), s.section.clone(), s.description.clone()])
        .collect();
    let vocab = tokenize::train_bpe(texts.iter().map(|s| s.as_str()), args.vocab_size)?;
    tokenize::save_vocab(&vocab, &args.out)?;
    manifest.output(&args.out);
    manifest.write(&manifest_path_for(&args.out))?;
    println!("learned {} merges (vocab size {})", vocab.merges().len(), vocab.size());
    Ok(())
}

pub fn run_tokenize_encode(args: &TokenizeEncodeArgs) -> Result<()> {
    let vocab = tokenize::load_vocab(&args.vocab).map_err(|e| match e {
        Error::Io(io) => with_path(io, &args.vocab),
        other => other,
    })?;
    let mut lines: Vec<serde_json::Value> = Vec::new();
    match (&args.text, &args.input) {
        (Some(text), None) => {
            let seq = tokenize::encode(&vocab, text);
            lines.push(serde_json::json!({ "ids": seq.ids, "word_ids": seq.word_ids }));
        }
        (None, Some(input)) => {
            let corpus = read_corpus(input)?;
            for sample in &corpus.samples {
                let seq = tokenize::encode(&vocab, &sample.caption);
                lines.push(serde_json::json!({
                    "sample_id": sample.id,
                    "ids": seq.ids,
                    "word_ids": seq.word_ids,
                }));
            }
        }
        _ => {
            return Err(Error::InvalidArgument(
                "encode needs exactly one of --text or --input".into(),
            ))
        }
    }
    let mut rendered = String::new();
    for line in &lines {
        rendered.push_str(&line.to_string());
        rendered.push('\n');
    }
    match &args.out {
        Some(out) => std::fs::write(out, rendered).map_err(|e| with_path(e, out))?,
        None => print!("{rendered}"),
    }
    Ok(())
}

// --- mask ---------------------------------------------------------------------

pub fn run_mask(args: &MaskArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("mask", serde_json::json!({
        "strategy": args.strategy, "p": args.p, "ratio": args.ratio, "threads": args.threads,
    }));
    manifest.input(&args.corpus).input(&args.vocab).seed(args.seed);
    let corpus = read_corpus(&args.corpus)?;
    let vocab = tokenize::load_vocab(&args.vocab).map_err(|e| match e {
        Error::Io(io) => with_path(io, &args.vocab),
        other => other,
    })?;
    let annotations = match &args.annotations {
        Some(path) => {
            manifest.input(path);
            let (set, rejects) = ner::load_annotations(path)?;
            if !rejects.is_empty() {
                eprintln!("warning: {} annotation records rejected", rejects.len());
            }
            set
        }
        None => AnnotationSet::default(),
    };
    let strategy = parse_strategy(&args.strategy, args.p, args.ratio)?;
    let pairs = mask::mask_corpus(&vocab, &corpus, &annotations, strategy, args.seed, args.threads)?;
    mask::write_masked_jsonl(&pairs, &args.out)?;
    manifest.output(&args.out);
    manifest.write(&manifest_path_for(&args.out))?;
    println!("masked {} captions with {}", pairs.len(), strategy.name());
    Ok(())
}

// --- split --------------------------------------------------------------------

pub fn run_split(args: &SplitArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("split", serde_json::json!({
        "context": args.context, "threshold": args.threshold,
    }));
    manifest.input(&args.corpus);
    let corpus = read_corpus(&args.corpus)?;
    let mode: ContextMode = args.context.parse()?;
    let records = split::assign(&corpus, mode, args.threshold);
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(&args.out).map_err(|e| with_path(e, &args.out))?,
    );
    for record in &records {
        serde_json::to_writer(&mut w, record).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    manifest.output(&args.out);
    manifest.write(&manifest_path_for(&args.out))?;
    let easy = records.iter().filter(|r| r.label == split::SubsetLabel::Easy).count();
    println!(
        "{}",
        serde_json::json!({ "samples": records.len(), "easy": easy, "hard": records.len() - easy })
    );
    Ok(())
}

pub fn read_split_records(path: &Path) -> Result<Vec<JaccardRecord>> {
    let text = read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(e.to_string())))
        .collect()
}

// --- train (pretrain / finetune) ------------------------------------------------

/// Flat key-value hyperparameter file; every key is optional and explicit
/// CLI flags win.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperFile {
    pub arch: Option<String>,
    pub block: Option<String>,
    pub d_model: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub kernel: Option<usize>,
    pub max_len: Option<usize>,
    pub dropout: Option<f64>,
    pub max_context_tokens: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub weight_decay: Option<f64>,
    pub warmup: Option<f64>,
}

pub fn parse_arch(s: &str) -> Result<Arch> {
    match s {
        "decoder-prefix" => Ok(Arch::DecoderPrefix),
        "encoder-decoder" => Ok(Arch::EncoderDecoder),
        other => Err(Error::InvalidArgument(format!("unknown arch `{other}`"))),
    }
}

pub fn parse_block(s: &str) -> Result<BlockKind> {
    match s {
        "dynamic-conv" => Ok(BlockKind::DynamicConv),
        "self-attn" => Ok(BlockKind::SelfAttn),
        other => Err(Error::InvalidArgument(format!("unknown block `{other}`"))),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedTrain {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub max_context_tokens: usize,
}

fn load_hyper_file(path: Option<&PathBuf>) -> Result<HyperFile> {
    match path {
        None => Ok(HyperFile::default()),
        Some(path) => {
            let text = read_to_string(path)?;
            toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn resolve_train_config(
    args: &TrainArgs,
    vocab: &BpeVocab,
    d_img: usize,
    default_lr: f64,
    default_epochs: usize,
) -> Result<ResolvedTrain> {
    let file = load_hyper_file(args.config.as_ref())?;
    let pick = |flag: Option<&String>, file_value: Option<&String>, default: &str| -> String {
        flag.or(file_value).cloned().unwrap_or_else(|| default.to_string())
    };
    let model = ModelConfig {
        arch: parse_arch(&pick(args.model.arch.as_ref(), file.arch.as_ref(), "decoder-prefix"))?,
        block: parse_block(&pick(args.model.block.as_ref(), file.block.as_ref(), "dynamic-conv"))?,
        d_model: args.model.d_model.or(file.d_model).unwrap_or(64),
        n_layers: args.model.layers.or(file.layers).unwrap_or(2),
        n_heads: args.model.heads.or(file.heads).unwrap_or(4),
        conv_kernel: args.model.kernel.or(file.kernel).unwrap_or(3),
        d_img,
        vocab_size: vocab.size(),
        max_len: args.model.max_len.or(file.max_len).unwrap_or(48),
        dropout: args.model.dropout.or(file.dropout).unwrap_or(0.0),
    };
    let train = TrainConfig {
        learning_rate: args.train.lr.or(file.lr).unwrap_or(default_lr),
        weight_decay: args.train.weight_decay.or(file.weight_decay).unwrap_or(0.01),
        warmup_fraction: args.train.warmup.or(file.warmup).unwrap_or(0.05),
        batch_size: args.train.batch_size.or(file.batch_size).unwrap_or(16),
        epochs: args.train.epochs.or(file.epochs).unwrap_or(default_epochs),
        seed: args.seed,
        ..TrainConfig::default()
    };
    Ok(ResolvedTrain {
        model,
        train,
        max_context_tokens: args
            .model
            .max_context_tokens
            .or(file.max_context_tokens)
            .unwrap_or(48),
    })
}

fn truncate_ids(ids: Vec<u32>, cap: usize) -> Vec<u32> {
    let mut ids = ids;
    ids.truncate(cap);
    ids
}

pub fn build_pretrain_items(
    vocab: &BpeVocab,
    corpus: &Corpus,
    annotations: &AnnotationSet,
    features: Option<&FeatureStore>,
    strategy: MaskStrategy,
    seed: u64,
    max_context_tokens: usize,
) -> Result<Vec<TrainItem>> {
    corpus
        .samples
        .iter()
        .map(|sample| {
            let pair = mask::build_training_pair(vocab, sample, strategy, annotations, seed)?;
            Ok(training_pair_to_item(pair, sample, features, max_context_tokens))
        })
        .collect()
}

pub fn build_finetune_items(
    vocab: &BpeVocab,
    corpus: &Corpus,
    features: Option<&FeatureStore>,
    max_context_tokens: usize,
) -> Result<Vec<TrainItem>> {
    Ok(corpus
        .samples
        .iter()
        .map(|sample| {
            let caption_ids = tokenize::encode(vocab, &sample.caption).ids;
            let image = sample
                .image_feature_id
                .as_deref()
                .and_then(|id| features.and_then(|f| f.get(id)))
                .map(|v| v.to_vec());
            TrainItem {
                masked: clean_instance(&caption_ids, 0),
                image,
                description_ids: truncate_ids(
                    tokenize::encode(vocab, &sample.description).ids,
                    max_context_tokens,
                ),
                section_ids: truncate_ids(
                    tokenize::encode(vocab, &sample.section).ids,
                    max_context_tokens,
                ),
            }
        })
        .collect())
}

fn training_pair_to_item(
    pair: TrainingPair,
    sample: &mnemcap_core::corpus::ContextualSample,
    features: Option<&FeatureStore>,
    max_context_tokens: usize,
) -> TrainItem {
    let image = sample
        .image_feature_id
        .as_deref()
        .and_then(|id| features.and_then(|f| f.get(id)))
        .map(|v| v.to_vec());
    TrainItem {
        masked: pair.masked,
        image,
        description_ids: truncate_ids(pair.description_ids, max_context_tokens),
        section_ids: truncate_ids(pair.section_ids, max_context_tokens),
    }
}

pub fn run_train(args: &TrainArgs, phase_pretrain: bool) -> Result<()> {
    let phase = if phase_pretrain { "pretrain" } else { "finetune" };
    let corpus = read_corpus(&args.corpus)?;
    let vocab = tokenize::load_vocab(&args.vocab).map_err(|e| match e {
        Error::Io(io) => with_path(io, &args.vocab),
        other => other,
    })?;
    let features = match &args.features {
        Some(path) => Some(corpus::load_features(path).map_err(|e| match e {
            Error::Io(io) => with_path(io, path),
            other => other,
        })?),
        None => None,
    };
    let d_img = features.as_ref().map(|f| f.dim).unwrap_or(32);
    let (default_lr, default_epochs) = if phase_pretrain { (1e-4, 3) } else { (1e-5, 3) };
    let resolved = resolve_train_config(args, &vocab, d_img, default_lr, default_epochs)?;
    let mut manifest = ManifestBuilder::new(phase, &resolved);
    manifest.input(&args.corpus).input(&args.vocab).seed(args.seed);

    let items = if phase_pretrain {
        let annotations = match &args.annotations {
            Some(path) => {
                manifest.input(path);
                ner::load_annotations(path)?.0
            }
            None => AnnotationSet::default(),
        };
        let strategy_name = args.strategy.as_deref().unwrap_or("mnem-decoder");
        let strategy = parse_strategy(strategy_name, args.p, args.ratio)?;
        build_pretrain_items(
            &vocab,
            &corpus,
            &annotations,
            features.as_ref(),
            strategy,
            args.seed,
            resolved.max_context_tokens,
        )?
    } else {
        build_finetune_items(&vocab, &corpus, features.as_ref(), resolved.max_context_tokens)?
    };

    let model = Model::<f32>::new(resolved.model.clone())?;
    let mut params: ModelParams<f32> = match &args.init {
        Some(init) => {
            manifest.input(init);
            let (loaded_config, params) = load_checkpoint::<f32>(init)?;
            if loaded_config != resolved.model {
                return Err(Error::InvalidArgument(
                    "checkpoint config differs from requested model config; pass matching flags"
                        .into(),
                ));
            }
            params
        }
        None => model.init_params(args.seed),
    };
    let diag_path = args.out.with_extension("diag.mnem");
    let mut diagnostic = |p: &ModelParams<f32>| {
        let _ = save_checkpoint(&resolved.model, p, &diag_path);
    };
    let curve = train(&model, &mut params, &resolved.train, &items, Some(&mut diagnostic))?;
    save_checkpoint(&resolved.model, &params, &args.out)?;
    manifest.output(&args.out);
    manifest.write(&manifest_path_for(&args.out))?;
    println!(
        "{}",
        serde_json::json!({
            "phase": phase,
            "items": items.len(),
            "steps": curve.per_step.len(),
            "first_loss": curve.per_step.first(),
            "last_loss": curve.per_step.last(),
            "epoch_means": curve.per_epoch,
        })
    );
    Ok(())
}

// --- generate -----------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct GeneratedLine {
    pub sample_id: String,
    pub caption: String,
}

pub fn generate_captions(
    model: &Model<f32>,
    params: &ModelParams<f32>,
    vocab: &BpeVocab,
    corpus: &Corpus,
    features: Option<&FeatureStore>,
    use_image: bool,
    mode: DecodeMode,
    max_new_tokens: usize,
    max_context_tokens: usize,
) -> Result<HashMap<String, String>> {
    let mut out = HashMap::new();
    for sample in &corpus.samples {
        let desc = truncate_ids(tokenize::encode(vocab, &sample.description).ids, max_context_tokens);
        let sec = truncate_ids(tokenize::encode(vocab, &sample.section).ids, max_context_tokens);
        let image = if use_image {
            sample
                .image_feature_id
                .as_deref()
                .and_then(|id| features.and_then(|f| f.get(id)))
        } else {
            None
        };
        let ctx = ContextInput { image, description_ids: &desc, section_ids: &sec };
        let ids = model.generate(params, &ctx, mode, max_new_tokens)?;
        out.insert(sample.id.clone(), tokenize::decode(vocab, &ids, true)?);
    }
    Ok(out)
}

pub fn run_generate(args: &GenerateArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("generate", serde_json::json!({
        "beam": args.beam, "max_new_tokens": args.max_new_tokens, "no_image": args.no_image,
    }));
    manifest.input(&args.checkpoint).input(&args.corpus).input(&args.vocab);
    let (config, params) = load_checkpoint::<f32>(&args.checkpoint).map_err(|e| match e {
        Error::Io(io) => with_path(io, &args.checkpoint),
        other => other,
    })?;
    let model = Model::<f32>::new(config)?;
    let corpus = read_corpus(&args.corpus)?;
    let vocab = tokenize::load_vocab(&args.vocab)?;
    let features = match &args.features {
        Some(path) => {
            manifest.input(path);
            Some(corpus::load_features(path)?)
        }
        None => None,
    };
    let mode = if args.beam <= 1 { DecodeMode::Greedy } else { DecodeMode::Beam { width: args.beam } };
    let generated = generate_captions(
        &model,
        &params,
        &vocab,
        &corpus,
        features.as_ref(),
        !args.no_image,
        mode,
        args.max_new_tokens,
        args.max_context_tokens,
    )?;
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(&args.out).map_err(|e| with_path(e, &args.out))?,
    );
    for sample in &corpus.samples {
        let line = GeneratedLine {
            sample_id: sample.id.clone(),
            caption: generated.get(&sample.id).cloned().unwrap_or_default(),
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    manifest.output(&args.out);
    manifest.write(&manifest_path_for(&args.out))?;
    println!("generated {} captions", corpus.len());
    Ok(())
}

// --- eval ---------------------------------------------------------------------

pub fn read_generated(path: &Path) -> Result<HashMap<String, String>> {
    let text = read_to_string(path)?;
    let mut out = HashMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let parsed: GeneratedLine =
            serde_json::from_str(line).map_err(|e| Error::Format(e.to_string()))?;
        out.insert(parsed.sample_id, parsed.caption);
    }
    Ok(out)
}

pub fn run_eval(args: &EvalArgs) -> Result<()> {
    let generated = read_generated(&args.generated)?;
    let corpus = read_corpus(&args.corpus)?;
    let gazetteer: Option<Gazetteer> = match &args.gazetteer {
        Some(path) => Some(ner::load_gazetteer(path).map_err(|e| match e {
            Error::Io(io) => with_path(io, path),
            other => other,
        })?),
        None => None,
    };
    let split_records = match &args.split {
        Some(path) => Some(read_split_records(path)?),
        None => None,
    };
    let report = metrics::evaluate(
        &generated,
        &corpus,
        gazetteer.as_ref(),
        split_records.as_deref(),
        args.smooth,
    )?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    println!("{json}");
    if let Some(out) = &args.out {
        let mut manifest = ManifestBuilder::new("eval", serde_json::json!({"smooth": args.smooth}));
        manifest.input(&args.generated).input(&args.corpus);
        std::fs::write(out, &json).map_err(|e| with_path(e, out))?;
        manifest.output(out);
        manifest.write(&manifest_path_for(out))?;
    }
    Ok(())
}

// --- synth --------------------------------------------------------------------

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthFile {
    pub n_samples: Option<usize>,
    pub n_entities_per_label: Option<usize>,
    pub entities_per_context: Option<usize>,
    pub entities_per_caption: Option<usize>,
    pub easy_fraction: Option<f64>,
    pub noise_level: Option<f64>,
    pub d_img: Option<usize>,
    pub seed: Option<u64>,
}

pub fn resolve_synth_config(args: &SynthArgs) -> Result<SynthConfig> {
    let file: SynthFile = match &args.config {
        Some(path) => {
            let text = read_to_string(path)?;
            toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        }
        None => SynthFile::default(),
    };
    let mut config = SynthConfig::default();
    if let Some(v) = file.n_samples {
        config.n_samples = v;
    }
    if let Some(v) = file.n_entities_per_label {
        config.n_entities_per_label = v;
    }
    if let Some(v) = file.entities_per_context {
        config.entities_per_context = v;
    }
    if let Some(v) = file.entities_per_caption {
        config.entities_per_caption = v;
    }
    if let Some(v) = file.easy_fraction {
        config.easy_fraction = v;
    }
    if let Some(v) = file.noise_level {
        config.noise_level = v;
    }
    if let Some(v) = file.d_img {
        config.d_img = v;
    }
    if let Some(v) = file.seed {
        config.seed = v;
    }
    if let Some(v) = args.samples {
        config.n_samples = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.easy_fraction {
        config.easy_fraction = v;
    }
    Ok(config)
}

pub struct SynthPaths {
    pub corpus: PathBuf,
    pub annotations: PathBuf,
    pub features: PathBuf,
    pub gazetteer: PathBuf,
}

pub fn synth_paths(dir: &Path) -> SynthPaths {
    SynthPaths {
        corpus: dir.join("corpus.jsonl"),
        annotations: dir.join("annotations.jsonl"),
        features: dir.join("features.wfea"),
        gazetteer: dir.join("gazetteer.tsv"),
    }
}

pub fn run_synth(args: &SynthArgs) -> Result<()> {
    let config = resolve_synth_config(args)?;
    if args.describe {
        let spec = synth::describe(&config)?;
        println!("{}", serde_json::to_string_pretty(&spec).map_err(|e| Error::Format(e.to_string()))?);
        return Ok(());
    }
    let mut manifest = ManifestBuilder::new("synth", &config);
    manifest.seed(config.seed);
    std::fs::create_dir_all(&args.out).map_err(|e| with_path(e, &args.out))?;
    let output = synth::generate(&config)?;
    let paths = synth_paths(&args.out);
    corpus::export_jsonl(&output.corpus, &paths.corpus)?;
    ner::save_annotations(&output.annotations, &paths.annotations)?;
    corpus::save_features(&output.features, &paths.features)?;
    ner::save_gazetteer(&output.inventory.gazetteer(), &paths.gazetteer)?;
    for p in [&paths.corpus, &paths.annotations, &paths.features, &paths.gazetteer] {
        manifest.output(p);
    }
    manifest.write(&args.out.join("manifest.json"))?;
    println!(
        "{}",
        serde_json::json!({
            "samples": output.corpus.len(),
            "entities": output.inventory.entries.len(),
            "out": args.out.display().to_string(),
        })
    );
    Ok(())
}

// --- gradcheck ------------------------------------------------------------------

pub fn run_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let archs: Vec<Arch> = match args.arch.as_str() {
        "all" => vec![Arch::DecoderPrefix, Arch::EncoderDecoder],
        other => vec![parse_arch(other)?],
    };
    let blocks: Vec<BlockKind> = match args.block.as_str() {
        "all" => vec![BlockKind::DynamicConv, BlockKind::SelfAttn],
        other => vec![parse_block(other)?],
    };
    let mut reports = Vec::new();
    let mut worst = 0.0f64;
    for &arch in &archs {
        for &block in &blocks {
            let report = mnemcap_model::gradcheck::grad_check(arch, block, args.seed)?;
            println!(
                "{:?}/{:?}: max relative error {:.3e} ({})",
                arch,
                block,
                report.max_rel_err,
                if report.max_rel_err < 1e-3 { "pass" } else { "FAIL" }
            );
            worst = worst.max(report.max_rel_err);
            reports.push(report);
        }
    }
    if let Some(out) = &args.out {
        write_json(out, &reports)?;
    }
    if worst >= 1e-3 {
        return Err(Error::Validation(format!(
            "gradient check failed: max relative error {worst:.3e}"
        )));
    }
    Ok(())
}
