//! The optimization loop: seeded shuffling, batch-mean gradients, Adam,
//! periodic validation with early stopping and checkpoint output.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::batch::{batchify, Batch, EncodedExample};
use crate::data::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::eval::evaluate_corpus;
use crate::metrics::{MetricReport, MetricSet};
use crate::model::{CedualModel, ContentClassifier, DecodeStrategy, LossBreakdown};
use crate::optim::{Adam, AdamConfig};

/// The dropout stream is kept apart from the shuffling stream so that each
/// is reproducible on its own.
const DROPOUT_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    /// Hard cap on optimizer steps.
    pub max_steps: u64,
    /// Hard cap on passes over the training set.
    pub max_epochs: usize,
    /// Validate every this many steps (and once at the end).
    pub eval_every: u64,
    /// Stop after this many evaluations without a new best perplexity.
    pub patience: usize,
    /// Learning-rate multiplier for the adversarial content classifier.
    pub adversary_lr_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 16,
            max_steps: 10_000,
            max_epochs: 100,
            eval_every: 200,
            patience: 5,
            adversary_lr_scale: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.max_steps == 0 || self.max_epochs == 0 {
            return Err(Error::Config("max_steps and max_epochs must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be positive".into()));
        }
        Ok(())
    }
}

/// Losses of one optimizer step, averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub l_dis_c: f64,
    pub l_dis_e: f64,
    pub l_dis: f64,
    pub l_gen: f64,
    pub l_total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_adv: Option<f64>,
}

/// Where training writes its artifacts. Files in `dir`:
/// `curves.jsonl` (one [`StepRecord`] per step), `evals.jsonl` (one
/// [`MetricReport`] per validation), `last.ckpt` (refreshed at every
/// validation and at the end) and `best.ckpt` (best validation perplexity).
#[derive(Debug, Clone)]
pub struct Artifacts<'a> {
    pub dir: PathBuf,
    pub vocab: &'a Vocabulary,
    pub run_config: String,
}

impl Artifacts<'_> {
    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }

    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }

    fn save(&self, path: &Path, model: &CedualModel, seed: u64, step: u64) -> Result<()> {
        Checkpoint {
            model: model.clone(),
            vocab: self.vocab.clone(),
            seed,
            step,
            run_config: self.run_config.clone(),
        }
        .save(path)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The best-validation model, or the final one without validation data.
    pub model: CedualModel,
    /// Step at which `model` was taken.
    pub model_step: u64,
    pub steps: u64,
    pub curve: Vec<StepRecord>,
    pub evals: Vec<MetricReport>,
    pub stopped_early: bool,
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len() as f64;
    let mut m = LossBreakdown::default();
    for b in items {
        m.l_dis_c += b.l_dis_c / n;
        m.l_dis_e += b.l_dis_e / n;
        m.l_dis += b.l_dis / n;
        m.l_gen += b.l_gen / n;
        m.l_total += b.l_total / n;
    }
    m
}

/// Batch means of one step's losses and gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrads {
    pub losses: LossBreakdown,
    pub adv: Option<f64>,
    pub grads: Vec<Vec<f64>>,
    /// Pooled content features, one row per example.
    pub pooled_c: Vec<Vec<f64>>,
}

/// Batch-mean losses and gradients; examples run one at a time so each sees
/// only its own padding.
pub fn batch_gradients(model: &CedualModel, batch: &Batch, mut dropout: Option<&mut ChaCha8Rng>) -> Result<BatchGrads> {
    let b = batch.len() as f64;
    let mut sum: Vec<Vec<f64>> = model.params().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    let mut losses = Vec::with_capacity(batch.len());
    let mut pooled_c = Vec::with_capacity(batch.len());
    let mut adv: Option<f64> = None;
    for i in 0..batch.len() {
        let ex = model.loss_and_grads(&batch.example(i), dropout.as_deref_mut())?;
        for (s, g) in sum.iter_mut().zip(&ex.grads) {
            for (s, g) in s.iter_mut().zip(g) {
                *s += g / b;
            }
        }
        if let Some(a) = ex.adv {
            *adv.get_or_insert(0.0) += a / b;
        }
        losses.push(ex.losses);
        pooled_c.push(ex.pooled_c);
    }
    Ok(BatchGrads {
        losses: mean_breakdown(&losses),
        adv,
        grads: sum,
        pooled_c,
    })
}

struct Logs {
    curves: Option<BufWriter<File>>,
    evals: Option<BufWriter<File>>,
    dir: Option<PathBuf>,
}

impl Logs {
    fn open(artifacts: Option<&Artifacts<'_>>) -> Result<Self> {
        let Some(a) = artifacts else {
            return Ok(Self {
                curves: None,
                evals: None,
                dir: None,
            });
        };
        fs::create_dir_all(&a.dir).map_err(|e| Error::io(&a.dir, e))?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let p = a.dir.join(name);
            Ok(BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?))
        };
        Ok(Self {
            curves: Some(open("curves.jsonl")?),
            evals: Some(open("evals.jsonl")?),
            dir: Some(a.dir.clone()),
        })
    }

    fn write(w: &mut Option<BufWriter<File>>, dir: &Option<PathBuf>, line: String) -> Result<()> {
        if let (Some(w), Some(d)) = (w.as_mut(), dir) {
            writeln!(w, "{line}").map_err(|e| Error::io(d, e))?;
        }
        Ok(())
    }

    fn step(&mut self, r: &StepRecord) -> Result<()> {
        Self::write(&mut self.curves, &self.dir, serde_json::to_string(r).expect("records serialize"))
    }

    fn eval(&mut self, r: &MetricReport) -> Result<()> {
        Self::write(&mut self.evals, &self.dir, r.to_json_line())
    }

    fn flush(&mut self) -> Result<()> {
        for w in [&mut self.curves, &mut self.evals].into_iter().flatten() {
            w.flush().map_err(|e| Error::io(self.dir.clone().unwrap_or_default(), e))?;
        }
        Ok(())
    }
}

/// Trains `model` on `train_set`, validating on `valid_set` when given.
///
/// A non-finite loss or gradient aborts with [`Error::Divergence`]; the
/// rejected step never touches the weights, and with artifacts enabled
/// those last good weights are written to `last.ckpt` first.
pub fn train(
    mut model: CedualModel,
    train_set: &[EncodedExample],
    valid_set: Option<&[EncodedExample]>,
    config: &TrainConfig,
    artifacts: Option<&Artifacts<'_>>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Contract("training corpus is empty".into()));
    }
    let mut logs = Logs::open(artifacts)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(DROPOUT_STREAM);
    let mut opt = Adam::new(config.adam, model.params());
    if model.config().content_classifier == ContentClassifier::Adversarial {
        opt.scale_lr(model.params(), "classifier.content.", config.adversary_lr_scale)?;
    }
    let mut curve = Vec::new();
    let mut evals = Vec::new();
    let mut best: Option<(f64, CedualModel, u64)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let validate_every = |step: u64| step.is_multiple_of(config.eval_every);

    'epochs: for epoch in 0..config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let shuffled: Vec<EncodedExample> = order.iter().map(|&i| train_set[i].clone()).collect();
        for batch in batchify(&shuffled, config.batch_size)? {
            let step = opt.step_count() + 1;
            let dropout = (model.config().layer.dropout > 0.0).then_some(&mut dropout_rng);
            let outcome = batch_gradients(&model, &batch, dropout).and_then(|g| {
                if !g.losses.l_total.is_finite() || g.adv.is_some_and(|a| !a.is_finite()) {
                    return Err(Error::NonFinite { op: "loss" });
                }
                opt.step(model.params_mut(), &g.grads)?;
                model.update_feature_stats(&g.pooled_c)?;
                Ok((g.losses, g.adv))
            });
            let (losses, adv) = match outcome {
                Ok(v) => v,
                Err(e @ (Error::NonFinite { .. } | Error::NonFiniteGradient { .. })) => {
                    logs.flush()?;
                    if let Some(a) = artifacts {
                        a.save(&a.last(), &model, config.seed, step - 1)?;
                    }
                    return Err(Error::Divergence {
                        step,
                        reason: format!("{e} (epoch {epoch}, batch of {} examples)", batch.len()),
                    });
                }
                Err(e) => return Err(e),
            };
            let record = StepRecord {
                step,
                epoch,
                lr: config.adam.lr_at(step),
                l_dis_c: losses.l_dis_c,
                l_dis_e: losses.l_dis_e,
                l_dis: losses.l_dis,
                l_gen: losses.l_gen,
                l_total: losses.l_total,
                l_adv: adv,
            };
            logs.step(&record)?;
            curve.push(record);

            let last_step = step >= config.max_steps;
            if validate_every(step) || last_step {
                if let Some(valid) = valid_set {
                    let metrics = MetricSet {
                        acc: true,
                        bleu: false,
                        ppl: true,
                    };
                    let report = evaluate_corpus(&model, valid, metrics, DecodeStrategy::Greedy, 1, step)?;
                    let ppl = report.ppl.expect("perplexity requested");
                    logs.eval(&report)?;
                    evals.push(report);
                    if best.as_ref().is_none_or(|(b, _, _)| ppl < *b) {
                        best = Some((ppl, model.clone(), step));
                        since_best = 0;
                        if let Some(a) = artifacts {
                            a.save(&a.best(), &model, config.seed, step)?;
                        }
                    } else {
                        since_best += 1;
                    }
                }
                if let Some(a) = artifacts {
                    a.save(&a.last(), &model, config.seed, step)?;
                }
                if since_best >= config.patience {
                    stopped_early = true;
                    break 'epochs;
                }
            }
            if last_step {
                break 'epochs;
            }
        }
    }
    let steps = opt.step_count();
    if let Some(a) = artifacts {
        a.save(&a.last(), &model, config.seed, steps)?;
    }
    logs.flush()?;
    let (model, model_step) = match best {
        Some((_, m, s)) => (m, s),
        None => (model, steps),
    };
    Ok(TrainOutcome {
        model,
        model_step,
        steps,
        curve,
        evals,
        stopped_early,
    })
}
