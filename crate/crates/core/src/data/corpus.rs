//! Corpus files: native JSONL dialogues and the EMPATHETICDIALOGUES CSV layout.
//!
//! A JSONL line holds one dialogue:
//!
//! ```json
//! {"utterances":[{"role":"speaker","text":"..."}, ...], "response":"...", "emotion":"excited"}
//! ```
//!
//! `response`, when present, is appended as a final listener turn. Loading
//! expands every listener turn into one [`DialogueExample`] whose history is
//! everything before that turn.
//!
//! The CSV layout has a header row and the columns
//! `conv_id,utterance_idx,context,prompt,speaker_idx,utterance,...`; `context`
//! is the emotion label, commas inside text are written as `_comma_`, and
//! odd `utterance_idx` values are speaker turns.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::dialogue::{check_alternation, DialogueExample, Role, Utterance};
use super::labels::LabelSet;
use super::tokenize::tokenize;
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
    CsvEd,
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(CorpusFormat::Jsonl),
            "csv-ed" => Ok(CorpusFormat::CsvEd),
            other => Err(Error::Config(format!(
                "unknown corpus format {other:?}; expected jsonl or csv-ed"
            ))),
        }
    }
}

impl fmt::Display for CorpusFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorpusFormat::Jsonl => "jsonl",
            CorpusFormat::CsvEd => "csv-ed",
        })
    }
}

/// One JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogueRecord {
    pub utterances: Vec<Utterance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    pub emotion: String,
}

impl DialogueRecord {
    /// All turns, with `response` appended as a listener turn.
    pub fn turns(&self) -> Vec<Utterance> {
        let mut turns = self.utterances.clone();
        if let Some(r) = &self.response {
            turns.push(Utterance::listener(r.clone()));
        }
        turns
    }

    pub fn from_example(ex: &DialogueExample, labels: &LabelSet) -> Self {
        Self {
            utterances: ex.utterances().to_vec(),
            response: Some(ex.gold_response().to_string()),
            emotion: labels
                .name(ex.emotion().index())
                .expect("label belongs to set")
                .to_string(),
        }
    }
}

/// One example per listener turn of a dialogue.
pub fn expand_dialogue(turns: &[Utterance], emotion: &str, labels: &LabelSet) -> Result<Vec<DialogueExample>> {
    check_alternation(turns)?;
    let label = labels.resolve(emotion)?;
    turns
        .iter()
        .enumerate()
        .filter(|(_, u)| u.role == Role::Listener)
        .map(|(i, u)| DialogueExample::new(turns[..i].to_vec(), u.text.clone(), label))
        .collect()
}

fn with_line<T>(line: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format { msg, .. } => Error::Format { line, msg },
        Error::UnknownEmotion { label, valid } => Error::Format {
            line,
            msg: format!("unknown emotion {label:?}; valid labels: {valid}"),
        },
        other => other,
    })
}

pub fn read_jsonl_records(path: &Path) -> Result<Vec<DialogueRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Format {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl_records(path: &Path, records: &[DialogueRecord]) -> Result<()> {
    let mut file = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    file.flush().map_err(|e| Error::io(path, e))
}

type CsvConversation = (String, Vec<(usize, String)>, String);

/// Parses the EMPATHETICDIALOGUES CSV layout into dialogue records, one per
/// conversation in file order.
pub fn read_csv_ed(path: &Path) -> Result<Vec<DialogueRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Format {
            line: 1,
            msg: e.to_string(),
        })?;
    // (conversation id, numbered turns, emotion) in file order.
    let mut records: Vec<CsvConversation> = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Format {
            line,
            msg: e.to_string(),
        })?;
        if row.len() < 6 {
            return Err(Error::Format {
                line,
                msg: format!("expected at least 6 columns, found {}", row.len()),
            });
        }
        let conv = row[0].to_string();
        let idx: usize = row[1].trim().parse().map_err(|_| Error::Format {
            line,
            msg: format!("bad utterance_idx {:?}", &row[1]),
        })?;
        let emotion = row[2].trim().to_string();
        let text = row[5].replace("_comma_", ",");
        match records.last_mut() {
            Some((c, turns, e)) if *c == conv => {
                if *e != emotion {
                    return Err(Error::Format {
                        line,
                        msg: format!("conversation {conv} changes emotion"),
                    });
                }
                turns.push((idx, text));
            }
            _ => records.push((conv, vec![(idx, text)], emotion)),
        }
    }
    records
        .into_iter()
        .map(|(conv, mut turns, emotion)| {
            turns.sort_by_key(|(idx, _)| *idx);
            let utterances = turns
                .into_iter()
                .map(|(idx, text)| {
                    if idx % 2 == 1 {
                        Utterance::speaker(text)
                    } else {
                        Utterance::listener(text)
                    }
                })
                .collect::<Vec<_>>();
            if utterances.first().map(|u| u.role) != Some(Role::Speaker) {
                return Err(Error::Format {
                    line: 0,
                    msg: format!("conversation {conv} does not start at utterance_idx 1"),
                });
            }
            Ok(DialogueRecord {
                utterances,
                response: None,
                emotion,
            })
        })
        .collect()
}

pub fn read_records(path: &Path, format: CorpusFormat) -> Result<Vec<DialogueRecord>> {
    match format {
        CorpusFormat::Jsonl => read_jsonl_records(path),
        CorpusFormat::CsvEd => read_csv_ed(path),
    }
}

/// Loads a corpus and expands it into per-listener-turn examples.
pub fn load_corpus(path: &Path, format: CorpusFormat, labels: &LabelSet) -> Result<Vec<DialogueExample>> {
    let records = read_records(path, format)?;
    let mut out = Vec::new();
    for (i, r) in records.iter().enumerate() {
        out.extend(with_line(i + 1, expand_dialogue(&r.turns(), &r.emotion, labels))?);
    }
    Ok(out)
}

/// Vocabulary over the histories and gold responses of `examples`, counting
/// each history once per example that contains it.
pub fn build_vocabulary(examples: &[DialogueExample], min_freq: usize) -> Vocabulary {
    let sentences: Vec<Vec<String>> = examples
        .iter()
        .flat_map(|ex| {
            ex.utterances()
                .iter()
                .map(|u| tokenize(&u.text))
                .chain(std::iter::once(tokenize(ex.gold_response())))
        })
        .collect();
    Vocabulary::build(sentences.iter().map(Vec::as_slice), min_freq)
}

/// Rewrites a CSV-layout corpus as JSONL, one dialogue per line. A trailing
/// listener turn becomes the `response` field.
pub fn convert_csv_to_jsonl(input: &Path, output: &Path) -> Result<usize> {
    let mut records = read_csv_ed(input)?;
    for r in &mut records {
        if r.utterances.last().map(|u| u.role) == Some(Role::Listener) {
            r.response = r.utterances.pop().map(|u| u.text);
        }
    }
    write_jsonl_records(output, &records)?;
    Ok(records.len())
}
