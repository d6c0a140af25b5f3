use serde::{Deserialize, Serialize};

use super::tokenize::tokenize;
use super::vocab::{Vocabulary, SEP_LISTENER, SEP_SPEAKER};
use crate::error::{Error, Result};
use crate::model::EmotionLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Speaker,
    Listener,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Utterance {
    pub role: Role,
    pub text: String,
}

impl Utterance {
    pub fn speaker(text: impl Into<String>) -> Self {
        Self {
            role: Role::Speaker,
            text: text.into(),
        }
    }

    pub fn listener(text: impl Into<String>) -> Self {
        Self {
            role: Role::Listener,
            text: text.into(),
        }
    }
}

/// A dialogue history `U1 S1 … Ut`, the gold listener reply and the label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueExample {
    utterances: Vec<Utterance>,
    gold_response: String,
    emotion: EmotionLabel,
}

/// Checks that turns alternate starting with the speaker.
pub fn check_alternation(utterances: &[Utterance]) -> Result<()> {
    for (i, u) in utterances.iter().enumerate() {
        let expected = if i % 2 == 0 { Role::Speaker } else { Role::Listener };
        if u.role != expected {
            return Err(Error::Format {
                line: 0,
                msg: format!("turn {} should be {expected:?}, found {:?}", i + 1, u.role),
            });
        }
    }
    Ok(())
}

impl DialogueExample {
    pub fn new(utterances: Vec<Utterance>, gold_response: impl Into<String>, emotion: EmotionLabel) -> Result<Self> {
        let gold_response = gold_response.into();
        check_alternation(&utterances)?;
        if utterances.last().map(|u| u.role) != Some(Role::Speaker) {
            return Err(Error::Format {
                line: 0,
                msg: "history must end with a speaker turn".into(),
            });
        }
        if tokenize(&gold_response).is_empty() {
            return Err(Error::Format {
                line: 0,
                msg: "gold response is empty".into(),
            });
        }
        Ok(Self {
            utterances,
            gold_response,
            emotion,
        })
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn gold_response(&self) -> &str {
        &self.gold_response
    }

    pub fn emotion(&self) -> EmotionLabel {
        self.emotion
    }
}

/// `[SEP_SPEAKER] u1 [SEP_LISTENER] s1 … [SEP_SPEAKER] ut`, left-truncated to
/// at most `max_len` ids. When the newest speaker turn alone is too long, its
/// separator is kept and the turn's oldest tokens are dropped.
pub fn flatten_history(utterances: &[Utterance], vocab: &Vocabulary, max_len: usize) -> Result<Vec<usize>> {
    check_alternation(utterances)?;
    if max_len < 2 {
        return Err(Error::Config("max_len must allow at least one token".into()));
    }
    let mut ids = Vec::new();
    let mut last_block = 0;
    for u in utterances {
        last_block = ids.len();
        ids.push(match u.role {
            Role::Speaker => SEP_SPEAKER,
            Role::Listener => SEP_LISTENER,
        });
        ids.extend(vocab.encode(&tokenize(&u.text)));
    }
    if ids.len() <= max_len {
        return Ok(ids);
    }
    if ids.len() - last_block > max_len {
        let mut out = vec![ids[last_block]];
        out.extend_from_slice(&ids[ids.len() - (max_len - 1)..]);
        return Ok(out);
    }
    Ok(ids[ids.len() - max_len..].to_vec())
}

pub fn flatten_dialogue(ex: &DialogueExample, vocab: &Vocabulary, max_len: usize) -> Result<Vec<usize>> {
    flatten_history(&ex.utterances, vocab, max_len)
}
