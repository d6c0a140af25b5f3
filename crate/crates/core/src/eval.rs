//! Corpus-level evaluation of a trained model.

use crate::data::batch::{Batch, EncodedExample};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, bleu, perplexity, MetricReport, MetricSet};
use crate::model::{predict_emotion, CedualModel, DecodeStrategy, ExampleEval};

/// Per-example teacher-forced numbers: losses, both class distributions
/// and the number of scored gold tokens.
pub fn example_evals(model: &CedualModel, examples: &[EncodedExample], shards: usize) -> Result<Vec<ExampleEval>> {
    sharded(examples, shards, |ex| {
        let batch = Batch::new(std::slice::from_ref(ex))?;
        model.evaluate(&batch.example(0))
    })
}

/// Token-weighted `exp(Σ NLL / Σ tokens)` from per-example evaluations.
pub fn corpus_perplexity(evals: &[ExampleEval]) -> Result<f64> {
    let tokens: usize = evals.iter().map(|e| e.gold_tokens).sum();
    let nll: f64 = evals.iter().map(|e| e.losses.l_gen * e.gold_tokens as f64).sum();
    perplexity(nll, tokens)
}

/// Fraction of examples whose `y_e` argmax equals the gold label.
pub fn emotion_accuracy(evals: &[ExampleEval], examples: &[EncodedExample]) -> Result<f64> {
    let predicted = evals
        .iter()
        .map(|e| predict_emotion(&e.y_e).map(|l| l.index()))
        .collect::<Result<Vec<_>>>()?;
    let gold: Vec<usize> = examples.iter().map(|e| e.emotion).collect();
    accuracy(&predicted, &gold)
}

/// Generated responses (ids, without SOS/EOS) for every example.
pub fn generate_all(
    model: &CedualModel,
    examples: &[EncodedExample],
    strategy: DecodeStrategy,
    shards: usize,
) -> Result<Vec<Vec<usize>>> {
    let max_new = model.config().layer.max_len - 1;
    sharded(examples, shards, |ex| model.generate(&ex.context, max_new, strategy))
}

/// Gold response ids without the trailing EOS.
pub fn references(examples: &[EncodedExample]) -> Vec<Vec<usize>> {
    examples
        .iter()
        .map(|e| e.response_gold[..e.response_gold.len() - 1].to_vec())
        .collect()
}

/// Computes the requested metrics over `examples`.
pub fn evaluate_corpus(
    model: &CedualModel,
    examples: &[EncodedExample],
    metrics: MetricSet,
    strategy: DecodeStrategy,
    shards: usize,
    step: u64,
) -> Result<MetricReport> {
    if examples.is_empty() {
        return Err(Error::Contract("evaluation corpus is empty".into()));
    }
    let mut report = MetricReport {
        variant: model.variant(),
        step,
        acc: None,
        bleu: None,
        ppl: None,
    };
    if metrics.acc || metrics.ppl {
        let evals = example_evals(model, examples, shards)?;
        if metrics.acc {
            report.acc = Some(emotion_accuracy(&evals, examples)?);
        }
        if metrics.ppl {
            report.ppl = Some(corpus_perplexity(&evals)?);
        }
    }
    if metrics.bleu {
        let hyps = generate_all(model, examples, strategy, shards)?;
        report.bleu = Some(bleu(&hyps, &references(examples))?);
    }
    Ok(report)
}

/// Maps `f` over `items`, split into `shards` contiguous chunks run on
/// scoped threads. Results keep input order, so the output does not depend
/// on the shard count.
pub fn sharded<T, R, F>(items: &[T], shards: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    if shards <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(shards);
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<R>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sharding_preserves_order() {
        let items: Vec<u64> = (0..103).collect();
        let one = sharded(&items, 1, |x| Ok(x * x)).unwrap();
        let four = sharded(&items, 4, |x| Ok(x * x)).unwrap();
        assert_eq!(one, four);
    }

    #[test]
    fn sharding_propagates_errors() {
        let items: Vec<u64> = (0..10).collect();
        let r = sharded(&items, 3, |&x| if x == 7 { Err(Error::EmptyPool) } else { Ok(x) });
        assert!(matches!(r, Err(Error::EmptyPool)));
    }
}
