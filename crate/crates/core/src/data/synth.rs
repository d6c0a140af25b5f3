//! Synthetic dialogues with two independent factors.
//!
//! Every dialogue draws a topic and an emotion independently. The speaker
//! turn contains filler words plus one topic token and one emotion marker at
//! random positions. The listener reply is fully determined by the two
//! factors: it names the sentiment word tied to the emotion and the keyword
//! tied to the topic, so a good response needs both factors while each
//! factor is recoverable from exactly one context token.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dialogue::{DialogueExample, Utterance};
use super::corpus::build_vocabulary;
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::model::EmotionLabel;

/// Layout of the synthetic word inventory for `vocab_size` words and `k`
/// emotions: `k` markers, `k` sentiment words, `vocab_size / 4` topics and
/// as many keywords; the rest are fillers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthLayout {
    pub k: usize,
    pub topics: usize,
    pub fillers: usize,
}

impl SynthLayout {
    pub fn new(k: usize, vocab_size: usize) -> Result<Self> {
        if k < 2 || k > vocab_size / 4 {
            return Err(Error::Config(format!(
                "synthetic corpus needs 2 <= k <= vocab_size/4 (k={k}, vocab_size={vocab_size})"
            )));
        }
        let topics = vocab_size / 4;
        let fillers = vocab_size - 2 * k - 2 * topics;
        if fillers < 2 {
            return Err(Error::Config(format!(
                "vocab_size {vocab_size} leaves fewer than 2 filler words"
            )));
        }
        Ok(Self { k, topics, fillers })
    }
}

pub fn marker_token(e: usize) -> String {
    format!("emo{e}")
}

pub fn sentiment_token(e: usize) -> String {
    format!("feel{e}")
}

pub fn topic_token(t: usize) -> String {
    format!("topic{t}")
}

pub fn keyword_token(t: usize) -> String {
    format!("kw{t}")
}

pub fn filler_token(f: usize) -> String {
    format!("w{f}")
}

/// A generated dialogue together with its hidden factors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthDialogue {
    pub example: DialogueExample,
    pub topic: usize,
    pub emotion: usize,
}

/// `size` dialogues drawn from `seed`; identical seeds give identical output.
pub fn synth_corpus(seed: u64, size: usize, k: usize, vocab_size: usize) -> Result<Vec<SynthDialogue>> {
    let layout = SynthLayout::new(k, vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(size);
    for _ in 0..size {
        let topic = rng.gen_range(0..layout.topics);
        let emotion = rng.gen_range(0..k);
        let len = rng.gen_range(3..=6);
        let mut words: Vec<String> = (0..len)
            .map(|_| filler_token(rng.gen_range(0..layout.fillers)))
            .collect();
        words.push(topic_token(topic));
        words.push(marker_token(emotion));
        words.shuffle(&mut rng);
        let response = format!("{} about {} .", sentiment_token(emotion), keyword_token(topic));
        let example = DialogueExample::new(
            vec![Utterance::speaker(words.join(" "))],
            response,
            EmotionLabel::new(emotion, k)?,
        )?;
        out.push(SynthDialogue {
            example,
            topic,
            emotion,
        });
    }
    Ok(out)
}

/// Every token of the corpus's contexts and responses.
pub fn synth_vocabulary(corpus: &[SynthDialogue]) -> Vocabulary {
    let examples: Vec<DialogueExample> = corpus.iter().map(|d| d.example.clone()).collect();
    build_vocabulary(&examples, 1)
}
