//! Command-line pipeline for contextual captioning: corpus ingestion,
//! entity annotation, BPE tokenization, caption masking, Easy/Hard splits,
//! training, generation, evaluation, and the one-command masking-strategy
//! experiment.

pub mod args;
pub mod commands;
pub mod experiment;
pub mod manifest;

use mnemcap_core::{Error, Result};
use serde::Deserialize;

use args::{Cli, Command, ExperimentArgs, TokenizeCmd};
use experiment::{report_table, run_experiment, ExperimentConfig};
use manifest::ManifestBuilder;

/// Flat TOML view of the experiment knobs; flags override.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentFile {
    strategies: Option<Vec<String>>,
    seeds: Option<Vec<u64>>,
    n_train: Option<usize>,
    n_test: Option<usize>,
    vocab_size: Option<usize>,
    synth_seed: Option<u64>,
    easy_fraction: Option<f64>,
    noise_level: Option<f64>,
    n_entities_per_label: Option<usize>,
    entities_per_context: Option<usize>,
    entities_per_caption: Option<usize>,
    pair_bias: Option<f64>,
    d_model: Option<usize>,
    layers: Option<usize>,
    heads: Option<usize>,
    kernel: Option<usize>,
    max_len: Option<usize>,
    dropout: Option<f64>,
    pretrain_lr: Option<f64>,
    pretrain_epochs: Option<usize>,
    finetune_lr: Option<f64>,
    finetune_epochs: Option<usize>,
    batch_size: Option<usize>,
    mnem_p: Option<f64>,
    mlm_ratio: Option<f64>,
    max_context_tokens: Option<usize>,
    beam: Option<usize>,
    threads: Option<usize>,
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|part| {
            part.trim()
                .parse::<T>()
                .map_err(|_| Error::InvalidArgument(format!("bad {what} entry `{part}`")))
        })
        .collect()
}

pub fn resolve_experiment_config(args: &ExperimentArgs) -> Result<ExperimentConfig> {
    let file: ExperimentFile = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| commands::with_path(e, path))?;
            toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        }
        None => ExperimentFile::default(),
    };
    let mut config = ExperimentConfig::default();
    if let Some(v) = file.strategies {
        config.strategies = v;
    }
    if let Some(v) = file.seeds {
        config.seeds = v;
    }
    if let Some(v) = file.n_train {
        config.n_train = v;
    }
    if let Some(v) = file.n_test {
        config.n_test = v;
    }
    if let Some(v) = file.vocab_size {
        config.vocab_size = v;
    }
    if let Some(v) = file.synth_seed {
        config.synth.seed = v;
    }
    if let Some(v) = file.easy_fraction {
        config.synth.easy_fraction = v;
    }
    if let Some(v) = file.noise_level {
        config.synth.noise_level = v;
    }
    if let Some(v) = file.n_entities_per_label {
        config.synth.n_entities_per_label = v;
    }
    if let Some(v) = file.entities_per_context {
        config.synth.entities_per_context = v;
    }
    if let Some(v) = file.entities_per_caption {
        config.synth.entities_per_caption = v;
    }
    if let Some(v) = file.pair_bias {
        config.synth.pair_bias = v;
    }
    if let Some(v) = file.d_model {
        config.d_model = v;
    }
    if let Some(v) = file.layers {
        config.n_layers = v;
    }
    if let Some(v) = file.heads {
        config.n_heads = v;
    }
    if let Some(v) = file.kernel {
        config.conv_kernel = v;
    }
    if let Some(v) = file.max_len {
        config.max_len = v;
    }
    if let Some(v) = file.dropout {
        config.dropout = v;
    }
    if let Some(v) = file.pretrain_lr {
        config.pretrain.learning_rate = v;
    }
    if let Some(v) = file.pretrain_epochs {
        config.pretrain.epochs = v;
    }
    if let Some(v) = file.finetune_lr {
        config.finetune.learning_rate = v;
    }
    if let Some(v) = file.finetune_epochs {
        config.finetune.epochs = v;
    }
    if let Some(v) = file.batch_size {
        config.pretrain.batch_size = v;
        config.finetune.batch_size = v;
    }
    if let Some(v) = file.mnem_p {
        config.mnem_p = v;
    }
    if let Some(v) = file.mlm_ratio {
        config.mlm_ratio = v;
    }
    if let Some(v) = file.max_context_tokens {
        config.max_context_tokens = v;
    }
    if let Some(v) = file.beam {
        config.beam = v;
    }
    if let Some(v) = file.threads {
        config.threads = v;
    }
    if let Some(s) = &args.strategies {
        config.strategies = parse_list(s, "strategy")?;
    }
    if let Some(s) = &args.seeds {
        config.seeds = parse_list(s, "seed")?;
    }
    if let Some(v) = args.threads {
        config.threads = v;
    }
    if let Some(v) = args.train_samples {
        config.n_train = v;
    }
    if let Some(v) = args.test_samples {
        config.n_test = v;
    }
    if let Some(v) = args.pretrain_epochs {
        config.pretrain.epochs = v;
    }
    if let Some(v) = args.finetune_epochs {
        config.finetune.epochs = v;
    }
    config.synth.n_samples = config.n_train + config.n_test;
    Ok(config)
}

fn run_experiment_cmd(args: &ExperimentArgs) -> Result<()> {
    let config = resolve_experiment_config(args)?;
    std::fs::create_dir_all(&args.out).map_err(|e| commands::with_path(e, &args.out))?;
    let mut manifest = ManifestBuilder::new("experiment", &config);
    let report = run_experiment(&config)?;
    let json_path = args.out.join("report.json");
    let table_path = args.out.join("report.txt");
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?,
    )
    .map_err(|e| commands::with_path(e, &json_path))?;
    let table = report_table(&report);
    std::fs::write(&table_path, &table).map_err(|e| commands::with_path(e, &table_path))?;
    manifest.output(&json_path).output(&table_path);
    manifest.write(&args.out.join("manifest.json"))?;
    print!("{table}");
    if report.runs.iter().any(|r| !r.ok) {
        eprintln!("warning: some runs failed; see report.json");
    }
    Ok(())
}

/// Dispatch a parsed command line. All subcommands return through here so
/// the binary can map errors onto exit codes.
pub fn run(cli: &Cli) -> Result<()> {
    if cli.print_allowlist {
        println!("{}", mnemcap_core::corpus::allowlist_description());
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err(Error::InvalidArgument(
            "no subcommand given (try --help or --print-allowlist)".into(),
        ));
    };
    match command {
        Command::Ingest(args) => commands::run_ingest(args),
        Command::Stats(args) => commands::run_stats(args),
        Command::Annotate(args) => commands::run_annotate(args),
        Command::Tokenize(TokenizeCmd::Train(args)) => commands::run_tokenize_train(args),
        Command::Tokenize(TokenizeCmd::Encode(args)) => commands::run_tokenize_encode(args),
        Command::Mask(args) => commands::run_mask(args),
        Command::Split(args) => commands::run_split(args),
        Command::Pretrain(args) => commands::run_train(args, true),
        Command::Finetune(args) => commands::run_train(args, false),
        Command::Generate(args) => commands::run_generate(args),
        Command::Eval(args) => commands::run_eval(args),
        Command::Synth(args) => commands::run_synth(args),
        Command::Gradcheck(args) => commands::run_gradcheck(args),
        Command::Experiment(args) => run_experiment_cmd(args),
    }
}
