use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::PathBuf;

use cedual::checkpoint::Checkpoint;
use cedual::data::dialogue::{flatten_history, Role, Utterance};
use cedual::data::labels::LabelSet;
use cedual::model::{predict_emotion, DecodeStrategy};
use cedual::Error;
use serde::{Deserialize, Serialize};

use super::{labels_for, load_checkpoint, Strategy};
use crate::error::{CliError, CliResult};

#[derive(Debug, clap::Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSONL file with one `{"utterances": [...]}` history per line.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t = Strategy::Greedy)]
    pub strategy: Strategy,
    /// Longest response in tokens; defaults to the model's max_len - 1.
    #[arg(long)]
    pub max_new: Option<usize>,
}

/// An input line. Other fields, such as a corpus line's `response`, are
/// ignored.
#[derive(Debug, Deserialize)]
struct Request {
    utterances: Vec<Utterance>,
}

#[derive(Debug, Serialize)]
struct Response<'a> {
    line: usize,
    response: String,
    emotion: &'a str,
}

/// Generates a reply to one history, returning the text and the predicted
/// emotion index.
pub fn respond(
    ckpt: &Checkpoint,
    history: &[Utterance],
    max_new: usize,
    strategy: DecodeStrategy,
) -> cedual::Result<(String, usize)> {
    if history.last().map(|u| u.role) != Some(Role::Speaker) {
        return Err(Error::Format {
            line: 0,
            msg: "history must end with a speaker turn".into(),
        });
    }
    let context = flatten_history(history, &ckpt.vocab, ckpt.model.config().layer.max_len)?;
    let ids = ckpt.model.generate(&context, max_new, strategy)?;
    let emotion = predict_emotion(&ckpt.model.context_views(&context)?.y_e)?;
    Ok((ckpt.vocab.decode(&ids).join(" "), emotion.index()))
}

fn handle_line(
    ckpt: &Checkpoint,
    labels: &LabelSet,
    line: &str,
    number: usize,
    max_new: usize,
    strategy: DecodeStrategy,
) -> cedual::Result<String> {
    let request: Request = serde_json::from_str(line).map_err(|e| Error::Format {
        line: number,
        msg: e.to_string(),
    })?;
    let (response, emotion) = respond(ckpt, &request.utterances, max_new, strategy).map_err(|e| match e {
        Error::Format { msg, .. } => Error::Format { line: number, msg },
        other => other,
    })?;
    let out = Response {
        line: number,
        response,
        emotion: labels.name(emotion).expect("prediction within label set"),
    };
    Ok(serde_json::to_string(&out).expect("responses serialize"))
}

pub fn run(args: &GenerateArgs) -> CliResult<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let labels = labels_for(ckpt.model.config().num_emotions)?;
    let max_new = args.max_new.unwrap_or(ckpt.model.config().layer.max_len - 1);
    if max_new == 0 {
        return Err(CliError::Usage("--max-new must be at least 1".into()));
    }
    let input = File::open(&args.input).map_err(|e| Error::io(&args.input, e))?;
    let output = File::create(&args.output).map_err(|e| Error::io(&args.output, e))?;
    let mut output = BufWriter::new(output);
    let (mut total, mut skipped) = (0, 0);
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&args.input, e))?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        match handle_line(&ckpt, &labels, &line, i + 1, max_new, args.strategy.into()) {
            Ok(json) => writeln!(output, "{json}").map_err(|e| Error::io(&args.output, e))?,
            Err(e @ (Error::Format { .. } | Error::Config(_))) => {
                skipped += 1;
                eprintln!("warning: skipping line {}: {e}", i + 1);
            }
            Err(e) => return Err(e.into()),
        }
    }
    output.flush().map_err(|e| Error::io(&args.output, e))?;
    if skipped > 0 {
        return Err(CliError::SkippedInputs { skipped, total });
    }
    Ok(())
}
