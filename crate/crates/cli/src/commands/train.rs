use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use cedual::data::batch::{encode_example, EncodedExample};
use cedual::data::corpus::{build_vocabulary, load_corpus, CorpusFormat};
use cedual::data::dialogue::DialogueExample;
use cedual::data::synth::synth_corpus;
use cedual::data::vocab::Vocabulary;
use cedual::model::CedualModel;
use cedual::train::{train, Artifacts};
use cedual::Error;
use serde::Serialize;

use super::labels_for;
use crate::config::{CorpusSource, Overrides, RunConfig};
use crate::error::{CliError, CliResult};

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Run configuration (flat TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub variant: Option<cedual::model::DecoderVariant>,
    /// Output directory for checkpoints and logs.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

/// The training data of a run, already split and encoded.
pub struct PreparedData {
    pub vocab: Vocabulary,
    pub num_emotions: usize,
    pub train: Vec<EncodedExample>,
    pub valid: Option<Vec<EncodedExample>>,
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    variant: &'a str,
    steps: u64,
    model_step: u64,
    stopped_early: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_ppl: Option<f64>,
    checkpoint: PathBuf,
}

fn file_examples(config: &RunConfig, path: &Path, num_emotions: usize) -> CliResult<Vec<DialogueExample>> {
    let format = match config.corpus {
        CorpusSource::Jsonl => CorpusFormat::Jsonl,
        CorpusSource::CsvEd => CorpusFormat::CsvEd,
        CorpusSource::Synthetic => unreachable!("synthetic corpora have no files"),
    };
    Ok(load_corpus(path, format, &labels_for(num_emotions)?)?)
}

/// Loads or generates the data a configuration names. The vocabulary comes
/// from the training split only.
pub fn prepare_data(config: &RunConfig) -> CliResult<PreparedData> {
    let (num_emotions, train_examples, valid_examples) = match config.corpus {
        CorpusSource::Synthetic => {
            let k = config.synth_emotions;
            let total = config.synth_train_size + config.synth_valid_size;
            let mut all: Vec<DialogueExample> = synth_corpus(config.seed(), total, k, config.synth_vocab_size)?
                .into_iter()
                .map(|d| d.example)
                .collect();
            let valid = all.split_off(config.synth_train_size);
            (k, all, (!valid.is_empty()).then_some(valid))
        }
        CorpusSource::Jsonl | CorpusSource::CsvEd => {
            let k = labels_for(32)?.k();
            let path = config.train_path.as_deref().expect("validated");
            let train = file_examples(config, path, k)?;
            let valid = match &config.valid_path {
                Some(p) => Some(file_examples(config, p, k)?),
                None => None,
            };
            (k, train, valid)
        }
    };
    if train_examples.is_empty() {
        return Err(CliError::Config("the training corpus has no examples".into()));
    }
    let vocab = build_vocabulary(&train_examples, config.min_freq);
    let encode = |examples: &[DialogueExample]| -> CliResult<Vec<EncodedExample>> {
        examples
            .iter()
            .map(|ex| encode_example(ex, &vocab, config.max_len).map_err(CliError::from))
            .collect()
    };
    let train = encode(&train_examples)?;
    let valid = valid_examples.as_deref().map(encode).transpose()?;
    Ok(PreparedData {
        vocab,
        num_emotions,
        train,
        valid,
    })
}

pub fn run(args: &TrainArgs, env_seed: Option<&str>, stdout: &mut dyn Write) -> CliResult<()> {
    let overrides = Overrides {
        config_path: args.config.clone(),
        set: args.set.clone(),
        seed: args.seed,
        variant: args.variant,
    };
    let config = RunConfig::resolve(&overrides, env_seed)?;
    let data = prepare_data(&config)?;
    let model = CedualModel::new(config.model(data.vocab.len(), data.num_emotions), config.seed())?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let run_config = config.to_toml();
    let config_path = args.out.join("config.toml");
    fs::write(&config_path, &run_config).map_err(|e| Error::io(&config_path, e))?;
    eprintln!(
        "training {} on {} examples ({} validation), vocabulary {}",
        config.variant,
        data.train.len(),
        data.valid.as_ref().map_or(0, Vec::len),
        data.vocab.len()
    );
    let artifacts = Artifacts {
        dir: args.out.clone(),
        vocab: &data.vocab,
        run_config,
    };
    let outcome = train(model, &data.train, data.valid.as_deref(), &config.train(), Some(&artifacts))?;
    let best_ppl = outcome
        .evals
        .iter()
        .filter_map(|r| r.ppl)
        .fold(None, |best: Option<f64>, p| Some(best.map_or(p, |b| b.min(p))));
    let checkpoint = if data.valid.is_some() {
        artifacts.best()
    } else {
        artifacts.last()
    };
    eprintln!("finished after {} steps; model from step {}", outcome.steps, outcome.model_step);
    let summary = Summary {
        variant: config.variant.name(),
        steps: outcome.steps,
        model_step: outcome.model_step,
        stopped_early: outcome.stopped_early,
        best_ppl,
        checkpoint,
    };
    writeln!(stdout, "{}", serde_json::to_string(&summary).expect("summary serializes"))
        .map_err(|e| Error::io("<stdout>", e))?;
    Ok(())
}
