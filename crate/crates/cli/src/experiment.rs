//! The masking-strategy comparison: generate a synthetic corpus once, then
//! for every (strategy, seed) pair pretrain (unless the strategy is "none"),
//! finetune identically, generate on the held-out test set, and evaluate —
//! with and without the image — reporting per-strategy medians.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use mnemcap_core::corpus::{split_dataset, Corpus, FeatureStore};
use mnemcap_core::mask::MaskStrategy;
use mnemcap_core::metrics::{evaluate, EvalReport};
use mnemcap_core::ner::{AnnotationSet, Gazetteer};
use mnemcap_core::split::{assign, ContextMode, JaccardRecord};
use mnemcap_core::synth::{self, SynthConfig};
use mnemcap_core::tokenize::{train_bpe, BpeVocab};
use mnemcap_core::{Error, Result};
use mnemcap_model::train::{train, TrainConfig};
use mnemcap_model::{Arch, BlockKind, DecodeMode, Model, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::commands::{build_finetune_items, build_pretrain_items, generate_captions, parse_strategy};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub strategies: Vec<String>,
    pub seeds: Vec<u64>,
    pub n_train: usize,
    pub n_test: usize,
    pub vocab_size: usize,
    pub synth: SynthConfig,
    pub arch: Arch,
    pub block: BlockKind,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub conv_kernel: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub pretrain: PhaseConfig,
    pub finetune: PhaseConfig,
    pub mnem_p: f64,
    pub mlm_ratio: f64,
    pub max_context_tokens: usize,
    pub beam: usize,
    pub max_new_tokens: usize,
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            strategies: vec![
                "none".into(),
                "mlm".into(),
                "full".into(),
                "mnem-decoder".into(),
            ],
            seeds: vec![1, 2, 3],
            n_train: 5000,
            n_test: 500,
            vocab_size: 512,
            synth: SynthConfig { n_samples: 5500, ..Default::default() },
            arch: Arch::DecoderPrefix,
            block: BlockKind::DynamicConv,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            conv_kernel: 3,
            max_len: 48,
            dropout: 0.0,
            pretrain: PhaseConfig { learning_rate: 3e-3, epochs: 2, batch_size: 16 },
            finetune: PhaseConfig { learning_rate: 1e-3, epochs: 2, batch_size: 16 },
            mnem_p: mnemcap_core::mask::DEFAULT_MNEM_P,
            mlm_ratio: mnemcap_core::mask::DEFAULT_MLM_RATIO,
            max_context_tokens: 48,
            beam: 1,
            max_new_tokens: 32,
            threads: 1,
        }
    }
}

impl ExperimentConfig {
    fn model_config(&self, vocab: &BpeVocab) -> ModelConfig {
        ModelConfig {
            arch: self.arch,
            block: self.block,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            conv_kernel: self.conv_kernel,
            d_img: self.synth.d_img,
            vocab_size: vocab.size(),
            max_len: self.max_len,
            dropout: self.dropout,
        }
    }

    fn train_config(&self, phase: &PhaseConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: phase.learning_rate,
            epochs: phase.epochs,
            batch_size: phase.batch_size,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub strategy: String,
    pub seed: u64,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain_final_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetune_final_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_no_image: Option<EvalReport>,
}

/// Medians over seeds for one strategy.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub n_runs: usize,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    pub ne_precision: f64,
    pub ne_recall: f64,
    pub ne_recall_no_image: f64,
    pub easy_cider_d: f64,
    pub hard_cider_d: f64,
    pub hard_gt_overlap: f64,
    pub hard_gen_overlap: f64,
    pub avg_gen_length: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub runs: Vec<RunResult>,
    pub summaries: Vec<StrategySummary>,
}

fn median(values: &mut Vec<f64>) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

struct SharedData {
    train: Corpus,
    test: Corpus,
    annotations: AnnotationSet,
    features: FeatureStore,
    gazetteer: Gazetteer,
    vocab: BpeVocab,
    split_records: Vec<JaccardRecord>,
}

fn prepare(config: &ExperimentConfig) -> Result<SharedData> {
    let mut synth_config = config.synth.clone();
    synth_config.n_samples = config.n_train + config.n_test;
    let output = synth::generate(&synth_config)?;
    let (train, _, test) = split_dataset(&output.corpus, synth_config.seed, 0, config.n_test)?;
    let texts: Vec<String> = train
        .samples
        .iter()
        .flat_map(|s| [s.caption.clone(), s.section.clone(), s.description.clone()])
        .collect();
    let vocab = train_bpe(texts.iter().map(|s| s.as_str()), config.vocab_size)?;
    let split_records = assign(&test, ContextMode::Wiki, 0.5);
    Ok(SharedData {
        train,
        test,
        annotations: output.annotations,
        features: output.features,
        gazetteer: output.inventory.gazetteer(),
        vocab,
        split_records,
    })
}

fn run_one(config: &ExperimentConfig, shared: &SharedData, strategy: &str, seed: u64) -> Result<RunResult> {
    let model_config = config.model_config(&shared.vocab);
    let model = Model::<f32>::new(model_config)?;
    let mut params = model.init_params(seed);

    let mut pretrain_final_loss = None;
    if strategy != "none" {
        let mask_strategy: MaskStrategy = parse_strategy(strategy, config.mnem_p, config.mlm_ratio)?;
        let items = build_pretrain_items(
            &shared.vocab,
            &shared.train,
            &shared.annotations,
            Some(&shared.features),
            mask_strategy,
            seed,
            config.max_context_tokens,
        )?;
        let curve = train(&model, &mut params, &config.train_config(&config.pretrain, seed), &items, None)?;
        pretrain_final_loss = curve.per_step.last().copied();
    }

    let items = build_finetune_items(
        &shared.vocab,
        &shared.train,
        Some(&shared.features),
        config.max_context_tokens,
    )?;
    let curve = train(&model, &mut params, &config.train_config(&config.finetune, seed), &items, None)?;
    let finetune_final_loss = curve.per_step.last().copied();

    let mode = if config.beam <= 1 { DecodeMode::Greedy } else { DecodeMode::Beam { width: config.beam } };
    let mut evals: Vec<EvalReport> = Vec::new();
    for use_image in [true, false] {
        let generated = generate_captions(
            &model,
            &params,
            &shared.vocab,
            &shared.test,
            Some(&shared.features),
            use_image,
            mode,
            config.max_new_tokens,
            config.max_context_tokens,
        )?;
        evals.push(evaluate(
            &generated,
            &shared.test,
            Some(&shared.gazetteer),
            Some(&shared.split_records),
            true,
        )?);
    }
    let eval_no_image = evals.pop();
    let eval = evals.pop();
    Ok(RunResult {
        strategy: strategy.to_string(),
        seed,
        ok: true,
        error: None,
        pretrain_final_loss,
        finetune_final_loss,
        eval,
        eval_no_image,
    })
}

fn summarize(strategy: &str, runs: &[RunResult]) -> StrategySummary {
    let picks: Vec<&RunResult> =
        runs.iter().filter(|r| r.strategy == strategy && r.ok).collect();
    let collect = |f: &dyn Fn(&RunResult) -> Option<f64>| -> f64 {
        let mut values: Vec<f64> = picks.iter().filter_map(|r| f(r)).collect();
        median(&mut values)
    };
    StrategySummary {
        strategy: strategy.to_string(),
        n_runs: picks.len(),
        bleu4: collect(&|r| r.eval.as_ref().map(|e| e.overall.bleu4)),
        rouge_l: collect(&|r| r.eval.as_ref().map(|e| e.overall.rouge_l)),
        cider_d: collect(&|r| r.eval.as_ref().map(|e| e.overall.cider_d)),
        ne_precision: collect(&|r| r.eval.as_ref().and_then(|e| e.overall.ne_precision)),
        ne_recall: collect(&|r| r.eval.as_ref().and_then(|e| e.overall.ne_recall)),
        ne_recall_no_image: collect(&|r| {
            r.eval_no_image.as_ref().and_then(|e| e.overall.ne_recall)
        }),
        easy_cider_d: collect(&|r| {
            r.eval.as_ref().and_then(|e| e.easy.as_ref()).map(|m| m.cider_d)
        }),
        hard_cider_d: collect(&|r| {
            r.eval.as_ref().and_then(|e| e.hard.as_ref()).map(|m| m.cider_d)
        }),
        hard_gt_overlap: collect(&|r| {
            r.eval.as_ref().and_then(|e| e.overlap.as_ref()).map(|o| o.hard.gt_overlap)
        }),
        hard_gen_overlap: collect(&|r| {
            r.eval.as_ref().and_then(|e| e.overlap.as_ref()).map(|o| o.hard.gen_overlap)
        }),
        avg_gen_length: collect(&|r| r.eval.as_ref().map(|e| e.overall.avg_gen_length)),
    }
}

/// Run every (strategy, seed) combination; failures mark their run and leave
/// the rest of the report intact.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    if config.strategies.is_empty() || config.seeds.is_empty() {
        return Err(Error::InvalidArgument("experiment needs strategies and seeds".into()));
    }
    for strategy in &config.strategies {
        if strategy != "none" {
            parse_strategy(strategy, config.mnem_p, config.mlm_ratio)?;
        }
    }
    let shared = prepare(config)?;
    let jobs: Vec<(String, u64)> = config
        .strategies
        .iter()
        .flat_map(|s| config.seeds.iter().map(move |&seed| (s.clone(), seed)))
        .collect();

    let n_workers = config.threads.max(1).min(jobs.len());
    let results: Vec<RunResult> = if n_workers == 1 {
        jobs.iter()
            .map(|(strategy, seed)| run_or_mark(config, &shared, strategy, *seed))
            .collect()
    } else {
        let slots: Mutex<Vec<Option<RunResult>>> = Mutex::new(vec![None; jobs.len()]);
        let next = AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..n_workers {
                scope.spawn(|| loop {
                    let idx = next.fetch_add(1, Ordering::SeqCst);
                    if idx >= jobs.len() {
                        break;
                    }
                    let (strategy, seed) = &jobs[idx];
                    let result = run_or_mark(config, &shared, strategy, *seed);
                    slots.lock().expect("report lock").as_mut_slice()[idx] = Some(result);
                });
            }
        });
        slots
            .into_inner()
            .expect("report lock")
            .into_iter()
            .map(|r| r.expect("all jobs completed"))
            .collect()
    };

    let summaries = config
        .strategies
        .iter()
        .map(|s| summarize(s, &results))
        .collect();
    Ok(ExperimentReport { config: config.clone(), runs: results, summaries })
}

fn run_or_mark(
    config: &ExperimentConfig,
    shared: &SharedData,
    strategy: &str,
    seed: u64,
) -> RunResult {
    match run_one(config, shared, strategy, seed) {
        Ok(result) => result,
        Err(e) => RunResult {
            strategy: strategy.to_string(),
            seed,
            ok: false,
            error: Some(e.to_string()),
            pretrain_final_loss: None,
            finetune_final_loss: None,
            eval: None,
            eval_no_image: None,
        },
    }
}

/// Aligned-column text rendering of the summary block.
pub fn report_table(report: &ExperimentReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<14} {:>5} {:>8} {:>8} {:>8} {:>8} {:>8} {:>9} {:>9} {:>8} {:>8}\n",
        "strategy", "runs", "BLEU-4", "ROUGE-L", "CIDEr-D", "NE-P", "NE-R", "EasyCID", "HardCID", "GT-ol", "Gen-ol"
    ));
    for s in &report.summaries {
        out.push_str(&format!(
            "{:<14} {:>5} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>9.4} {:>9.4} {:>8.4} {:>8.4}\n",
            s.strategy,
            s.n_runs,
            s.bleu4,
            s.rouge_l,
            s.cider_d,
            s.ne_precision,
            s.ne_recall,
            s.easy_cider_d,
            s.hard_cider_d,
            s.hard_gt_overlap,
            s.hard_gen_overlap,
        ));
    }
    out
}
