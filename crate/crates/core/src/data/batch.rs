//! Id encoding and padded batches.

use super::dialogue::{flatten_dialogue, DialogueExample};
use super::tokenize::tokenize;
use super::vocab::{Vocabulary, EOS, PAD, SOS};
use crate::error::{Error, Result};
use crate::model::ExampleInput;

/// One example as ids: the flattened context, the shifted decoder input
/// `[SOS r1 … rn]` and the gold targets `[r1 … rn EOS]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub context: Vec<usize>,
    pub response_in: Vec<usize>,
    pub response_gold: Vec<usize>,
    pub emotion: usize,
}

/// Encodes one example; both sides are limited to `max_len` positions.
pub fn encode_example(ex: &DialogueExample, vocab: &Vocabulary, max_len: usize) -> Result<EncodedExample> {
    let context = flatten_dialogue(ex, vocab, max_len)?;
    let mut body = vocab.encode(&tokenize(ex.gold_response()));
    body.truncate(max_len - 1);
    let mut response_in = vec![SOS];
    response_in.extend_from_slice(&body);
    let mut response_gold = body;
    response_gold.push(EOS);
    Ok(EncodedExample {
        context,
        response_in,
        response_gold,
        emotion: ex.emotion().index(),
    })
}

/// Rows padded with `PAD` to the longest member, plus validity masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub context: Vec<Vec<usize>>,
    pub context_valid: Vec<Vec<bool>>,
    pub response_in: Vec<Vec<usize>>,
    pub response_gold: Vec<Vec<usize>>,
    pub response_valid: Vec<Vec<bool>>,
    pub emotion: Vec<usize>,
}

fn pad_rows(rows: impl Iterator<Item = Vec<usize>> + Clone) -> (Vec<Vec<usize>>, Vec<Vec<bool>>) {
    let width = rows.clone().map(|r| r.len()).max().unwrap_or(0);
    rows.map(|mut r| {
        let valid: Vec<bool> = (0..width).map(|i| i < r.len()).collect();
        r.resize(width, PAD);
        (r, valid)
    })
    .unzip()
}

impl Batch {
    pub fn new(examples: &[EncodedExample]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Contract("a batch needs at least one example".into()));
        }
        let (context, context_valid) = pad_rows(examples.iter().map(|e| e.context.clone()));
        let (response_in, response_valid) = pad_rows(examples.iter().map(|e| e.response_in.clone()));
        let (response_gold, _) = pad_rows(examples.iter().map(|e| e.response_gold.clone()));
        Ok(Self {
            context,
            context_valid,
            response_in,
            response_gold,
            response_valid,
            emotion: examples.iter().map(|e| e.emotion).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.emotion.len()
    }

    pub fn is_empty(&self) -> bool {
        self.emotion.is_empty()
    }

    /// Row `b` as model input.
    pub fn example(&self, b: usize) -> ExampleInput<'_> {
        ExampleInput {
            context: &self.context[b],
            context_valid: &self.context_valid[b],
            response_in: &self.response_in[b],
            response_gold: &self.response_gold[b],
            response_valid: &self.response_valid[b],
            emotion: self.emotion[b],
        }
    }
}

/// Splits `examples` (in the given order) into consecutive batches.
pub fn batchify(examples: &[EncodedExample], batch_size: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    examples.chunks(batch_size).map(Batch::new).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dialogue::Utterance;
    use crate::model::EmotionLabel;

    fn setup() -> (Vocabulary, Vec<EncodedExample>) {
        let toks: Vec<String> = "a b c d e".split(' ').map(str::to_string).collect();
        let vocab = Vocabulary::build([toks.as_slice()], 1);
        let label = EmotionLabel::new(1, 4).unwrap();
        let exs = [("a b c", "d"), ("a", "d e c")]
            .iter()
            .map(|(c, r)| {
                let ex = DialogueExample::new(vec![Utterance::speaker(*c)], *r, label).unwrap();
                encode_example(&ex, &vocab, 16).unwrap()
            })
            .collect();
        (vocab, exs)
    }

    #[test]
    fn shifted_targets() {
        let (vocab, exs) = setup();
        assert_eq!(exs[0].response_in, vec![SOS, vocab.id("d")]);
        assert_eq!(exs[0].response_gold, vec![vocab.id("d"), EOS]);
    }

    #[test]
    fn padding_and_masks() {
        let (_, exs) = setup();
        let b = Batch::new(&exs).unwrap();
        assert_eq!(b.context[1], vec![exs[1].context[0], exs[1].context[1], PAD, PAD]);
        assert_eq!(b.context_valid[1], vec![true, true, false, false]);
        assert_eq!(b.response_valid[0], vec![true, true, false, false]);
        assert_eq!(b.response_gold[0][2], PAD);
    }

    #[test]
    fn batchify_keeps_order() {
        let (_, exs) = setup();
        let bs = batchify(&exs, 1).unwrap();
        assert_eq!(bs.len(), 2);
        assert_eq!(bs[1].context[0], exs[1].context);
        assert!(batchify(&exs, 0).is_err());
    }
}
