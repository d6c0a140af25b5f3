use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use cedual::checkpoint::Checkpoint;
use cedual::data::batch::{encode_example, EncodedExample};
use cedual::data::corpus::{load_corpus, CorpusFormat};
use cedual::eval::evaluate_corpus;
use cedual::metrics::{AblationReport, MetricReport, MetricSet};
use cedual::Error;

use super::{labels_for, load_checkpoint, Strategy};
use crate::error::{CliError, CliResult};

fn parse_metrics(s: &str) -> Result<MetricSet, Error> {
    MetricSet::parse(s)
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate; repeat for several (ablation needs all four variants).
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "jsonl")]
    pub format: CorpusFormat,
    /// Comma-separated subset of acc, bleu, ppl.
    #[arg(long, default_value = "acc,bleu,ppl", value_parser = parse_metrics)]
    pub metrics: MetricSet,
    #[arg(long, value_enum, default_value_t = Strategy::Greedy)]
    pub strategy: Strategy,
    /// Evaluation worker threads.
    #[arg(long, default_value_t = 1)]
    pub shards: usize,
    /// Treat the checkpoints as one model per decoder variant and build the
    /// ablation table.
    #[arg(long)]
    pub ablation: bool,
    /// Where to write the ablation table as TSV.
    #[arg(long, requires = "ablation")]
    pub tsv: Option<PathBuf>,
}

/// Encodes `corpus` for the model and vocabulary in `ckpt`.
pub fn encode_corpus(ckpt: &Checkpoint, corpus: &Path, format: CorpusFormat) -> CliResult<Vec<EncodedExample>> {
    let config = ckpt.model.config();
    let labels = labels_for(config.num_emotions)?;
    let examples = load_corpus(corpus, format, &labels)?;
    if examples.is_empty() {
        return Err(CliError::Config(format!("{} holds no examples", corpus.display())));
    }
    examples
        .iter()
        .map(|ex| encode_example(ex, &ckpt.vocab, config.layer.max_len).map_err(CliError::from))
        .collect()
}

pub fn evaluate_checkpoint(
    path: &Path,
    corpus: &Path,
    format: CorpusFormat,
    metrics: MetricSet,
    strategy: Strategy,
    shards: usize,
) -> CliResult<MetricReport> {
    let ckpt = load_checkpoint(path)?;
    let examples = encode_corpus(&ckpt, corpus, format)?;
    Ok(evaluate_corpus(
        &ckpt.model,
        &examples,
        metrics,
        strategy.into(),
        shards,
        ckpt.step,
    )?)
}

pub fn run(args: &EvalArgs, stdout: &mut dyn Write) -> CliResult<()> {
    if args.ablation && args.checkpoint.len() != 4 {
        return Err(CliError::Usage(format!(
            "--ablation needs exactly four checkpoints, got {}",
            args.checkpoint.len()
        )));
    }
    let reports = args
        .checkpoint
        .iter()
        .map(|p| evaluate_checkpoint(p, &args.corpus, args.format, args.metrics, args.strategy, args.shards.max(1)))
        .collect::<CliResult<Vec<_>>>()?;
    let reports = if args.ablation {
        let table = AblationReport::new(reports)?;
        eprint!("{}", table.to_table());
        if let Some(path) = &args.tsv {
            fs::write(path, table.to_tsv()).map_err(|e| Error::io(path, e))?;
        }
        table.rows
    } else {
        reports
    };
    for r in &reports {
        writeln!(stdout, "{}", r.to_json_line()).map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(())
}
