use std::io::{BufRead, IsTerminal, Write};
use std::path::PathBuf;

use cedual::checkpoint::Checkpoint;
use cedual::data::dialogue::{flatten_history, Role, Utterance};
use cedual::data::labels::LabelSet;
use cedual::model::DecodeStrategy;
use cedual::Error;

use super::generate::respond;
use super::{labels_for, load_checkpoint, Strategy};
use crate::error::CliResult;

const TOP_EMOTIONS: usize = 5;

#[derive(Debug, clap::Args)]
pub struct ChatArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = Strategy::Greedy)]
    pub strategy: Strategy,
}

/// A conversation with a loaded model. The stored history is unbounded;
/// the model sees its newest `max_len` tokens.
pub struct Session {
    ckpt: Checkpoint,
    labels: LabelSet,
    strategy: DecodeStrategy,
    history: Vec<Utterance>,
}

impl Session {
    pub fn new(ckpt: Checkpoint, strategy: DecodeStrategy) -> CliResult<Self> {
        let labels = labels_for(ckpt.model.config().num_emotions)?;
        Ok(Self {
            ckpt,
            labels,
            strategy,
            history: Vec::new(),
        })
    }

    pub fn history(&self) -> &[Utterance] {
        &self.history
    }

    pub fn reset(&mut self) {
        self.history.clear();
    }

    /// Appends `line` as a speaker turn and the model's reply as a listener
    /// turn; returns the reply.
    pub fn say(&mut self, line: &str) -> cedual::Result<String> {
        self.history.push(Utterance::speaker(line));
        let max_new = self.ckpt.model.config().layer.max_len - 1;
        match respond(&self.ckpt, &self.history, max_new, self.strategy) {
            Ok((reply, _)) => {
                self.history.push(Utterance::listener(reply.clone()));
                Ok(reply)
            }
            Err(e) => {
                self.history.pop();
                Err(e)
            }
        }
    }

    /// The `n` most probable emotions for the history so far, most probable
    /// first; `None` before the first exchange.
    pub fn top_emotions(&self, n: usize) -> cedual::Result<Option<Vec<(String, f64)>>> {
        // Read the history as the model would at its next turn.
        let upto = match self.history.last().map(|u| u.role) {
            None => return Ok(None),
            Some(Role::Speaker) => self.history.len(),
            Some(Role::Listener) => self.history.len() - 1,
        };
        let max_len = self.ckpt.model.config().layer.max_len;
        let context = flatten_history(&self.history[..upto], &self.ckpt.vocab, max_len)?;
        let y_e = self.ckpt.model.context_views(&context)?.y_e;
        let mut order: Vec<usize> = (0..y_e.len()).collect();
        order.sort_by(|&a, &b| y_e[b].total_cmp(&y_e[a]).then(a.cmp(&b)));
        Ok(Some(
            order
                .into_iter()
                .take(n)
                .map(|i| (self.labels.name(i).expect("index within label set").to_string(), y_e[i]))
                .collect(),
        ))
    }
}

/// Reads lines from `input` until `:quit` or end of input. Replies and
/// `:emotion` tables go to `out`; prompts and notices go to `err`.
pub fn repl(session: &mut Session, input: impl BufRead, out: &mut dyn Write, err: &mut dyn Write, prompt: bool) -> CliResult<()> {
    let io = |e| Error::io("<stdio>", e);
    if prompt {
        write!(err, "> ").map_err(io)?;
        err.flush().map_err(io)?;
    }
    for line in input.lines() {
        let line = line.map_err(io)?;
        let line = line.trim();
        match line {
            "" => {}
            ":quit" => return Ok(()),
            ":reset" => {
                session.reset();
                writeln!(err, "history cleared").map_err(io)?;
            }
            ":emotion" => match session.top_emotions(TOP_EMOTIONS)? {
                Some(top) => {
                    for (name, p) in top {
                        writeln!(out, "{name}\t{p}").map_err(io)?;
                    }
                }
                None => writeln!(err, "no history yet").map_err(io)?,
            },
            ":history" => {
                for u in session.history() {
                    let who = match u.role {
                        Role::Speaker => "speaker",
                        Role::Listener => "listener",
                    };
                    writeln!(out, "{who}\t{}", u.text).map_err(io)?;
                }
            }
            cmd if cmd.starts_with(':') => {
                writeln!(err, "unknown command {cmd}; try :emotion, :history, :reset or :quit").map_err(io)?;
            }
            text => {
                let reply = session.say(text)?;
                writeln!(out, "{reply}").map_err(io)?;
            }
        }
        out.flush().map_err(io)?;
        if prompt {
            write!(err, "> ").map_err(io)?;
            err.flush().map_err(io)?;
        }
    }
    Ok(())
}

pub fn run(args: &ChatArgs) -> CliResult<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let mut session = Session::new(ckpt, args.strategy.into())?;
    let stdin = std::io::stdin();
    let prompt = stdin.is_terminal();
    repl(
        &mut session,
        stdin.lock(),
        &mut std::io::stdout().lock(),
        &mut std::io::stderr().lock(),
        prompt,
    )
}
