//! Content/emotion dual-view encoder, two-stage decoders and the joint loss.
//!
//! The encoder output `H` is projected by two separate affine+ReLU heads into
//! a content view `H_c` and an emotion view `H_e`. Each view is mean-pooled
//! and classified over the `k` emotion labels: the content prediction `y_c`
//! is pushed toward maximum entropy, the emotion prediction `y_e` toward the
//! gold label. Decoding runs one decoder stage per view, in either order, or
//! a single stage over one view for the ablations.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::vocab::{EOS, PAD, SOS};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Initializer, ParamStore};
use crate::transformer::{
    decoder_stage_forward, encoder_forward, init_decoder_stage, init_encoder, init_linear,
    positional_encoding, AttentionMask, Ctx, LayerConfig,
};

/// Which decoder composition a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum DecoderVariant {
    /// Content stage, then emotion stage.
    Fcte,
    /// Emotion stage, then content stage.
    Fetc,
    /// One stage over the content view.
    #[serde(rename = "content")]
    ContentOnly,
    /// One stage over the emotion view.
    #[serde(rename = "emotion")]
    EmotionOnly,
}

impl DecoderVariant {
    pub const ALL: [DecoderVariant; 4] = [
        DecoderVariant::Fcte,
        DecoderVariant::Fetc,
        DecoderVariant::ContentOnly,
        DecoderVariant::EmotionOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DecoderVariant::Fcte => "fcte",
            DecoderVariant::Fetc => "fetc",
            DecoderVariant::ContentOnly => "content",
            DecoderVariant::EmotionOnly => "emotion",
        }
    }

    /// Parameter prefixes of the decoder stages, in execution order.
    pub fn stage_prefixes(self) -> &'static [&'static str] {
        match self {
            DecoderVariant::Fcte => &["decoder.fcte1", "decoder.fcte2"],
            DecoderVariant::Fetc => &["decoder.fetc1", "decoder.fetc2"],
            DecoderVariant::ContentOnly => &["decoder.content"],
            DecoderVariant::EmotionOnly => &["decoder.emotion"],
        }
    }

    pub fn is_two_stage(self) -> bool {
        self.stage_prefixes().len() == 2
    }
}

impl fmt::Display for DecoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DecoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fcte" => Ok(DecoderVariant::Fcte),
            "fetc" => Ok(DecoderVariant::Fetc),
            "content" | "content-only" | "c" => Ok(DecoderVariant::ContentOnly),
            "emotion" | "emotion-only" | "e" => Ok(DecoderVariant::EmotionOnly),
            other => Err(Error::Config(format!(
                "unknown variant {other:?}; expected fcte, fetc, content or emotion"
            ))),
        }
    }
}

/// How the content-view classifier is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContentClassifier {
    /// The classifier weights learn to predict the gold label from a detached
    /// copy of the pooled content features, while the encoder and content
    /// head maximize the entropy of that classifier's prediction. The
    /// classifier sees features standardized by running statistics, so
    /// shrinking a feature cannot hide it.
    Adversarial,
    /// Every parameter, classifier included, descends the joint loss.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layer: LayerConfig,
    pub vocab_size: usize,
    pub num_emotions: usize,
    pub variant: DecoderVariant,
    pub content_classifier: ContentClassifier,
    pub dis_c_weight: f64,
    pub dis_e_weight: f64,
}

impl ModelConfig {
    pub fn new(layer: LayerConfig, vocab_size: usize, num_emotions: usize, variant: DecoderVariant) -> Self {
        Self {
            layer,
            vocab_size,
            num_emotions,
            variant,
            content_classifier: ContentClassifier::Adversarial,
            dis_c_weight: 1.0,
            dis_e_weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.layer.validate()?;
        if self.vocab_size <= EOS {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room past the reserved ids",
                self.vocab_size
            )));
        }
        if self.num_emotions < 2 {
            return Err(Error::Config("num_emotions must be at least 2".into()));
        }
        Ok(())
    }
}

/// A gold emotion category among `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EmotionLabel {
    index: usize,
    k: usize,
}

impl EmotionLabel {
    pub fn new(index: usize, k: usize) -> Result<Self> {
        if index >= k {
            return Err(Error::IndexOutOfRange { index, len: k });
        }
        Ok(Self { index, k })
    }

    pub fn index(self) -> usize {
        self.index
    }

    pub fn k(self) -> usize {
        self.k
    }

    pub fn one_hot(self) -> Vec<f64> {
        (0..self.k).map(|i| if i == self.index { 1.0 } else { 0.0 }).collect()
    }
}

/// Tape handles for the two context views and their class predictions.
#[derive(Debug, Clone)]
pub struct DisentangledContext {
    pub h_c: Var,
    pub h_e: Var,
    pub pooled_c: Var,
    pub pooled_e: Var,
    pub logits_c: Var,
    pub logits_e: Var,
    pub y_c: Var,
    pub y_e: Var,
    pub pad_mask: Vec<bool>,
}

/// Scalar values of every loss term for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_dis_c: f64,
    pub l_dis_e: f64,
    pub l_dis: f64,
    pub l_gen: f64,
    pub l_total: f64,
}

/// Joint objective from its components: `l_dis = w_e·l_dis_e − w_c·l_dis_c`
/// and `l_total = l_gen + l_dis`. Both weights are 1 unless configured.
pub fn total_loss(l_gen: f64, l_dis_c: f64, l_dis_e: f64, dis_c_weight: f64, dis_e_weight: f64) -> LossBreakdown {
    let l_dis = dis_e_weight * l_dis_e - dis_c_weight * l_dis_c;
    LossBreakdown {
        l_dis_c,
        l_dis_e,
        l_dis,
        l_gen,
        l_total: l_gen + l_dis,
    }
}

/// Index of the largest probability; the lowest index wins ties.
pub fn predict_emotion(y_e: &[f64]) -> Result<EmotionLabel> {
    let mut best = 0;
    for (i, &p) in y_e.iter().enumerate() {
        if p > y_e[best] {
            best = i;
        }
    }
    EmotionLabel::new(best, y_e.len())
}

/// One teacher-forced training unit. Pad positions are marked false in the
/// validity masks; gold targets at pad positions are ignored.
#[derive(Debug, Clone, Copy)]
pub struct ExampleInput<'a> {
    pub context: &'a [usize],
    pub context_valid: &'a [bool],
    pub response_in: &'a [usize],
    pub response_gold: &'a [usize],
    pub response_valid: &'a [bool],
    pub emotion: usize,
}

/// Graph handles produced by [`CedualModel::forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub context: DisentangledContext,
    pub decoder_out: Var,
    pub logits: Var,
    pub l_dis_c: Var,
    pub l_dis_e: Var,
    pub l_dis: Var,
    pub l_gen: Var,
    pub l_total: Var,
    /// Classifier loss of the content-view adversary, when enabled.
    pub l_adv: Option<Var>,
    /// What backward should run on: `l_total`, plus `l_adv` when present.
    pub objective: Var,
}

/// Per-example evaluation numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleEval {
    pub losses: LossBreakdown,
    pub y_c: Vec<f64>,
    pub y_e: Vec<f64>,
    pub gold_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DecodeStrategy {
    #[default]
    Greedy,
    /// Width-5 beam search with length-normalized scores.
    Beam,
}

const BEAM_WIDTH: usize = 5;

/// Weight of the newest batch in the running feature statistics.
const STATS_MOMENTUM: f64 = 0.01;
/// Variance floor of the running standardization.
const STATS_EPS: f64 = 1e-12;
const FEATURE_MEAN: &str = "adversary.feature_mean";
const FEATURE_VAR: &str = "adversary.feature_var";

/// Runs the first decoder stage over `memory_first`, then the second stage
/// over `memory_second` with the first stage's output as its target stream.
/// Both orderings go through this one function.
#[allow(clippy::too_many_arguments)]
pub fn two_stage_decode(
    ctx: &mut Ctx<'_, '_>,
    memory_first: Var,
    memory_second: Var,
    memory_valid: &[bool],
    response: Var,
    self_mask: &AttentionMask,
    first_prefix: &str,
    second_prefix: &str,
) -> Result<Var> {
    if ctx.tape.shape(memory_first) != ctx.tape.shape(memory_second) {
        return Err(Error::Dimension(format!(
            "memory shapes {:?} and {:?} differ",
            ctx.tape.shape(memory_first),
            ctx.tape.shape(memory_second)
        )));
    }
    let v1 = decoder_stage_forward(ctx, memory_first, memory_valid, response, self_mask, first_prefix)?;
    decoder_stage_forward(ctx, memory_second, memory_valid, v1, self_mask, second_prefix)
}

/// A single decoder stage over one memory.
pub fn single_stage_decode(
    ctx: &mut Ctx<'_, '_>,
    memory: Var,
    memory_valid: &[bool],
    response: Var,
    self_mask: &AttentionMask,
    prefix: &str,
) -> Result<Var> {
    decoder_stage_forward(ctx, memory, memory_valid, response, self_mask, prefix)
}

/// The full model: configuration, weights, non-trained running statistics
/// and the cached positional table.
#[derive(Debug, Clone, PartialEq)]
pub struct CedualModel {
    config: ModelConfig,
    params: ParamStore,
    buffers: ParamStore,
    pe: Tensor,
}

/// Gradients and side values of one training example.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleGrads {
    pub losses: LossBreakdown,
    /// Adversary loss, when the content classifier is adversarial.
    pub adv: Option<f64>,
    /// Objective gradients in store order.
    pub grads: Vec<Vec<f64>>,
    /// Pooled content features of the example.
    pub pooled_c: Vec<f64>,
}

impl CedualModel {
    /// Freshly initialized weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Self::init_params(&config, &mut rng)?;
        let buffers = Self::init_buffers(&config)?;
        let pe = positional_encoding(config.layer.max_len, config.layer.d_model)?;
        Ok(Self {
            config,
            params,
            buffers,
            pe,
        })
    }

    /// Rebuilds a model from stored weights and statistics, checking names
    /// and shapes against the layout `config` implies.
    pub fn from_parts(config: ModelConfig, params: ParamStore, buffers: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        check_layout(&Self::init_params(&config, &mut rng)?, &params, "parameter")?;
        check_layout(&Self::init_buffers(&config)?, &buffers, "statistic")?;
        let pe = positional_encoding(config.layer.max_len, config.layer.d_model)?;
        Ok(Self {
            config,
            params,
            buffers,
            pe,
        })
    }

    fn init_buffers(config: &ModelConfig) -> Result<ParamStore> {
        let d = config.layer.d_model;
        let mut store = ParamStore::new();
        if config.content_classifier == ContentClassifier::Adversarial {
            store.insert(FEATURE_MEAN, Tensor::zeros(vec![d]))?;
            store.insert(FEATURE_VAR, Tensor::new(vec![d], vec![1.0; d])?)?;
        }
        Ok(store)
    }

    fn init_params(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
        let d = config.layer.d_model;
        let k = config.num_emotions;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(rng);
        store.insert("embed.token", init.uniform(vec![config.vocab_size, d], (1.0 / d as f64).sqrt() * 3f64.sqrt()))?;
        init_encoder(&mut store, &mut init, &config.layer, "encoder")?;
        init_linear(&mut store, &mut init, "head.content", d, d, true)?;
        init_linear(&mut store, &mut init, "head.emotion", d, d, true)?;
        init_linear(&mut store, &mut init, "classifier.content", d, k, true)?;
        init_linear(&mut store, &mut init, "classifier.emotion", d, k, true)?;
        for prefix in config.variant.stage_prefixes() {
            init_decoder_stage(&mut store, &mut init, &config.layer, prefix)?;
        }
        init_linear(&mut store, &mut init, "output", d, config.vocab_size, true)?;
        Ok(store)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Running statistics; never touched by the optimizer.
    pub fn buffers(&self) -> &ParamStore {
        &self.buffers
    }

    /// Folds one batch of pooled content features into the running mean and
    /// variance used to standardize the adversary's input. A no-op unless
    /// the content classifier is adversarial.
    pub fn update_feature_stats(&mut self, pooled: &[Vec<f64>]) -> Result<()> {
        if self.config.content_classifier != ContentClassifier::Adversarial || pooled.is_empty() {
            return Ok(());
        }
        let d = self.config.layer.d_model;
        if let Some(row) = pooled.iter().find(|r| r.len() != d) {
            return Err(Error::Dimension(format!("{} pooled features, expected {d}", row.len())));
        }
        let n = pooled.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| pooled.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let var: Vec<f64> = (0..d)
            .map(|j| pooled.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n)
            .collect();
        for (name, batch) in [(FEATURE_MEAN, mean), (FEATURE_VAR, var)] {
            let t = self.buffers.get_mut(name).expect("statistics exist in adversarial mode");
            for (v, b) in t.data_mut().iter_mut().zip(batch) {
                *v = (1.0 - STATS_MOMENTUM) * *v + STATS_MOMENTUM * b;
            }
        }
        Ok(())
    }

    /// Pooled content features standardized as the adversary sees them.
    pub fn standardized_features(&self, pooled: &[f64]) -> Result<Vec<f64>> {
        let d = self.config.layer.d_model;
        if pooled.len() != d {
            return Err(Error::Dimension(format!("{} pooled features, expected {d}", pooled.len())));
        }
        let (Some(mean), Some(var)) = (self.buffers.get(FEATURE_MEAN), self.buffers.get(FEATURE_VAR)) else {
            return Ok(pooled.to_vec());
        };
        Ok(pooled
            .iter()
            .zip(mean.data())
            .zip(var.data())
            .map(|((x, m), v)| (x - m) / (v + STATS_EPS).sqrt())
            .collect())
    }

    /// `(x − μ) / sqrt(σ² + ε)` with the running statistics as constants.
    fn standardize(&self, tape: &mut Tape<'_>, row: Var) -> Result<Var> {
        let d = self.config.layer.d_model;
        let mean = self.buffers.get(FEATURE_MEAN).expect("adversarial statistics");
        let var = self.buffers.get(FEATURE_VAR).expect("adversarial statistics");
        let inv: Vec<f64> = var.data().iter().map(|v| 1.0 / (v + STATS_EPS).sqrt()).collect();
        let mean = tape.constant(Tensor::new(vec![1, d], mean.data().to_vec())?);
        let inv = tape.constant(Tensor::new(vec![1, d], inv)?);
        let centered = tape.sub(row, mean)?;
        tape.mul(centered, inv)
    }

    pub fn variant(&self) -> DecoderVariant {
        self.config.variant
    }

    pub fn positional_table(&self) -> &Tensor {
        &self.pe
    }

    /// Encodes a flattened context into the two views and their pooled class
    /// distributions.
    pub fn encode_dual(
        &self,
        ctx: &mut Ctx<'_, '_>,
        context: &[usize],
        pad_mask: &[bool],
    ) -> Result<DisentangledContext> {
        if context.is_empty() || !pad_mask.iter().any(|&m| m) {
            return Err(Error::Contract("empty context".into()));
        }
        let embed = ctx.p("embed.token")?;
        let emb = ctx.tape.gather(embed, context)?;
        let h = encoder_forward(ctx, emb, pad_mask, "encoder")?;

        let h_c = ctx.linear(h, "head.content")?;
        let h_c = ctx.tape.relu(h_c)?;
        let h_e = ctx.linear(h, "head.emotion")?;
        let h_e = ctx.tape.relu(h_e)?;

        let d = self.config.layer.d_model;
        let pooled_c = ctx.tape.mean_pool(h_c, pad_mask)?;
        let pooled_e = ctx.tape.mean_pool(h_e, pad_mask)?;
        let row_c = ctx.tape.reshape(pooled_c, vec![1, d])?;
        let row_e = ctx.tape.reshape(pooled_e, vec![1, d])?;

        let logits_c = match self.config.content_classifier {
            ContentClassifier::Joint => ctx.linear(row_c, "classifier.content")?,
            ContentClassifier::Adversarial => {
                // Same weights, but as constants: the entropy term moves the
                // encoder and content head, never the classifier itself.
                let w = ctx.p("classifier.content.w")?;
                let b = ctx.p("classifier.content.b")?;
                let w = ctx.tape.detach(w);
                let b = ctx.tape.detach(b);
                let x = self.standardize(ctx.tape, row_c)?;
                let y = ctx.tape.matmul(x, w)?;
                ctx.tape.add_row(y, b)?
            }
        };
        let logits_e = ctx.linear(row_e, "classifier.emotion")?;
        let k = self.config.num_emotions;
        let logits_c = ctx.tape.reshape(logits_c, vec![k])?;
        let logits_e = ctx.tape.reshape(logits_e, vec![k])?;
        let y_c = ctx.tape.softmax(logits_c, 0)?;
        let y_e = ctx.tape.softmax(logits_e, 0)?;
        Ok(DisentangledContext {
            h_c,
            h_e,
            pooled_c,
            pooled_e,
            logits_c,
            logits_e,
            y_c,
            y_e,
            pad_mask: pad_mask.to_vec(),
        })
    }

    /// `(l_dis_c, l_dis_e, l_dis)`: entropy of `y_c`, cross-entropy of the
    /// emotion logits against `emotion`, and `w_e·l_dis_e − w_c·l_dis_c`.
    pub fn disentanglement_loss(
        &self,
        tape: &mut Tape<'_>,
        context: &DisentangledContext,
        emotion: EmotionLabel,
    ) -> Result<(Var, Var, Var)> {
        if emotion.k() != self.config.num_emotions {
            return Err(Error::Contract(format!(
                "label over {} classes for a model with {}",
                emotion.k(),
                self.config.num_emotions
            )));
        }
        let l_dis_c = tape.entropy(context.y_c)?;
        let l_dis_e = tape.cross_entropy(context.logits_e, &[Some(emotion.index())])?;
        let wc = tape.scale(l_dis_c, self.config.dis_c_weight)?;
        let we = tape.scale(l_dis_e, self.config.dis_e_weight)?;
        let l_dis = tape.sub(we, wc)?;
        Ok((l_dis_c, l_dis_e, l_dis))
    }

    /// Embeds the teacher-forced response with positions and runs the
    /// configured decoder composition, giving `V_f [m×d]`.
    pub fn decode(
        &self,
        ctx: &mut Ctx<'_, '_>,
        context: &DisentangledContext,
        response_in: &[usize],
        response_valid: &[bool],
    ) -> Result<Var> {
        let embed = ctx.p("embed.token")?;
        let emb = ctx.tape.gather(embed, response_in)?;
        let emb = ctx.add_positions(emb)?;
        let emb = ctx.dropout(emb)?;
        let self_mask = AttentionMask::combined(response_valid);
        let valid = &context.pad_mask;
        let stages = self.config.variant.stage_prefixes();
        match self.config.variant {
            DecoderVariant::Fcte => {
                two_stage_decode(ctx, context.h_c, context.h_e, valid, emb, &self_mask, stages[0], stages[1])
            }
            DecoderVariant::Fetc => {
                two_stage_decode(ctx, context.h_e, context.h_c, valid, emb, &self_mask, stages[0], stages[1])
            }
            DecoderVariant::ContentOnly => {
                single_stage_decode(ctx, context.h_c, valid, emb, &self_mask, stages[0])
            }
            DecoderVariant::EmotionOnly => {
                single_stage_decode(ctx, context.h_e, valid, emb, &self_mask, stages[0])
            }
        }
    }

    /// Vocabulary logits `[m×V]` from decoder states.
    pub fn output_logits(&self, ctx: &mut Ctx<'_, '_>, decoder_out: Var) -> Result<Var> {
        ctx.linear(decoder_out, "output")
    }

    /// Mean token cross-entropy over non-pad gold positions.
    pub fn generation_loss(&self, tape: &mut Tape<'_>, logits: Var, gold: &[usize], valid: &[bool]) -> Result<Var> {
        let rows = tape.shape(logits)[0];
        if gold.len() != rows || valid.len() != rows {
            return Err(Error::Dimension(format!(
                "{rows} logit rows but {} gold tokens / {} mask entries",
                gold.len(),
                valid.len()
            )));
        }
        let targets: Vec<Option<usize>> = gold
            .iter()
            .zip(valid)
            .map(|(&g, &v)| v.then_some(g))
            .collect();
        tape.cross_entropy(logits, &targets)
    }

    /// Full teacher-forced forward pass recording every loss term.
    pub fn forward(&self, ctx: &mut Ctx<'_, '_>, ex: &ExampleInput<'_>) -> Result<ForwardOutput> {
        let emotion = EmotionLabel::new(ex.emotion, self.config.num_emotions)?;
        let context = self.encode_dual(ctx, ex.context, ex.context_valid)?;
        let (l_dis_c, l_dis_e, l_dis) = self.disentanglement_loss(ctx.tape, &context, emotion)?;
        let decoder_out = self.decode(ctx, &context, ex.response_in, ex.response_valid)?;
        let logits = self.output_logits(ctx, decoder_out)?;
        let l_gen = self.generation_loss(ctx.tape, logits, ex.response_gold, ex.response_valid)?;
        let l_total = ctx.tape.add(l_gen, l_dis)?;

        let (l_adv, objective) = match self.config.content_classifier {
            ContentClassifier::Joint => (None, l_total),
            ContentClassifier::Adversarial => {
                let d = self.config.layer.d_model;
                let features = ctx.tape.detach(context.pooled_c);
                let features = ctx.tape.reshape(features, vec![1, d])?;
                let features = self.standardize(ctx.tape, features)?;
                let logits = ctx.linear(features, "classifier.content")?;
                let logits = ctx.tape.reshape(logits, vec![self.config.num_emotions])?;
                let l_adv = ctx.tape.cross_entropy(logits, &[Some(emotion.index())])?;
                let objective = ctx.tape.add(l_total, l_adv)?;
                (Some(l_adv), objective)
            }
        };
        Ok(ForwardOutput {
            context,
            decoder_out,
            logits,
            l_dis_c,
            l_dis_e,
            l_dis,
            l_gen,
            l_total,
            l_adv,
            objective,
        })
    }

    pub fn breakdown(&self, tape: &Tape<'_>, out: &ForwardOutput) -> LossBreakdown {
        LossBreakdown {
            l_dis_c: tape.scalar(out.l_dis_c),
            l_dis_e: tape.scalar(out.l_dis_e),
            l_dis: tape.scalar(out.l_dis),
            l_gen: tape.scalar(out.l_gen),
            l_total: tape.scalar(out.l_total),
        }
    }

    /// Losses, objective gradients and pooled content features for one
    /// example. Dropout is active only when `rng` is given.
    pub fn loss_and_grads(&self, ex: &ExampleInput<'_>, rng: Option<&mut ChaCha8Rng>) -> Result<ExampleGrads> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true);
        let out = {
            let mut ctx = Ctx::new(&mut tape, &bound, &self.config.layer, &self.pe);
            if let Some(rng) = rng {
                ctx = ctx.with_dropout(rng);
            }
            self.forward(&mut ctx, ex)?
        };
        tape.backward(out.objective)?;
        Ok(ExampleGrads {
            losses: self.breakdown(&tape, &out),
            adv: out.l_adv.map(|v| tape.scalar(v)),
            grads: bound.grads(&tape),
            pooled_c: tape.value(out.context.pooled_c).to_vec(),
        })
    }

    /// Eval-mode forward pass of one example.
    pub fn evaluate(&self, ex: &ExampleInput<'_>) -> Result<ExampleEval> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let mut ctx = Ctx::new(&mut tape, &bound, &self.config.layer, &self.pe);
        let out = self.forward(&mut ctx, ex)?;
        Ok(ExampleEval {
            losses: self.breakdown(&tape, &out),
            y_c: tape.value(out.context.y_c).to_vec(),
            y_e: tape.value(out.context.y_e).to_vec(),
            gold_tokens: ex.response_valid.iter().filter(|&&v| v).count(),
        })
    }

    /// Teacher-forced vocabulary logits `[m×V]` in eval mode.
    pub fn teacher_forced_logits(&self, ex: &ExampleInput<'_>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let mut ctx = Ctx::new(&mut tape, &bound, &self.config.layer, &self.pe);
        let out = self.forward(&mut ctx, ex)?;
        Ok(tape.tensor(out.logits))
    }

    /// The pair `(y_c, y_e)` and pooled content features for a context.
    pub fn context_views(&self, context: &[usize]) -> Result<ContextViews> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let mut ctx = Ctx::new(&mut tape, &bound, &self.config.layer, &self.pe);
        let valid = vec![true; context.len()];
        let views = self.encode_dual(&mut ctx, context, &valid)?;
        Ok(ContextViews {
            y_c: tape.value(views.y_c).to_vec(),
            y_e: tape.value(views.y_e).to_vec(),
            pooled_c: tape.value(views.pooled_c).to_vec(),
            pooled_e: tape.value(views.pooled_e).to_vec(),
        })
    }

    /// Autoregressive decoding from SOS until EOS or `max_new_tokens`. The
    /// returned ids exclude SOS and EOS. PAD and SOS are never emitted.
    pub fn generate(&self, context: &[usize], max_new_tokens: usize, strategy: DecodeStrategy) -> Result<Vec<usize>> {
        if max_new_tokens == 0 {
            return Err(Error::Contract("max_new_tokens must be at least 1".into()));
        }
        // Positions 0..=max_new_tokens must fit the positional table.
        let max_new_tokens = max_new_tokens.min(self.config.layer.max_len - 1).max(1);
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let mut ctx = Ctx::new(&mut tape, &bound, &self.config.layer, &self.pe);
        let valid = vec![true; context.len()];
        let views = self.encode_dual(&mut ctx, context, &valid)?;
        match strategy {
            DecodeStrategy::Greedy => self.greedy(&mut ctx, &views, max_new_tokens),
            DecodeStrategy::Beam => self.beam(&mut ctx, &views, max_new_tokens),
        }
    }

    fn next_log_probs(&self, ctx: &mut Ctx<'_, '_>, views: &DisentangledContext, prefix: &[usize]) -> Result<Vec<f64>> {
        let valid = vec![true; prefix.len()];
        let out = self.decode(ctx, views, prefix, &valid)?;
        let last = ctx.tape.shape(out)[0] - 1;
        let d = self.config.layer.d_model;
        let row = ctx.tape.value(out)[last * d..].to_vec();
        let row = ctx.tape.constant(Tensor::new(vec![1, d], row)?);
        let logits = self.output_logits(ctx, row)?;
        let mut logits = ctx.tape.value(logits).to_vec();
        logits[PAD] = f64::NEG_INFINITY;
        logits[SOS] = f64::NEG_INFINITY;
        let lse = crate::numerics::kernels::log_sum_exp(&logits);
        Ok(logits.iter().map(|v| v - lse).collect())
    }

    fn greedy(&self, ctx: &mut Ctx<'_, '_>, views: &DisentangledContext, max_new: usize) -> Result<Vec<usize>> {
        let mut prefix = vec![SOS];
        for _ in 0..max_new {
            let lp = self.next_log_probs(ctx, views, &prefix)?;
            let mut best = 0;
            for (i, &v) in lp.iter().enumerate() {
                if v > lp[best] {
                    best = i;
                }
            }
            if best == EOS {
                break;
            }
            prefix.push(best);
        }
        prefix.remove(0);
        Ok(prefix)
    }

    fn beam(&self, ctx: &mut Ctx<'_, '_>, views: &DisentangledContext, max_new: usize) -> Result<Vec<usize>> {
        // (tokens including SOS, summed log prob, finished)
        let mut beams: Vec<(Vec<usize>, f64, bool)> = vec![(vec![SOS], 0.0, false)];
        let norm = |b: &(Vec<usize>, f64, bool)| b.1 / (b.0.len() - 1).max(1) as f64;
        for _ in 0..max_new {
            if beams.iter().all(|b| b.2) {
                break;
            }
            let mut candidates = Vec::new();
            for beam in &beams {
                if beam.2 {
                    candidates.push(beam.clone());
                    continue;
                }
                let lp = self.next_log_probs(ctx, views, &beam.0)?;
                let mut order: Vec<usize> = (0..lp.len()).filter(|&i| lp[i].is_finite()).collect();
                order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
                for &tok in order.iter().take(BEAM_WIDTH) {
                    let mut tokens = beam.0.clone();
                    let done = tok == EOS;
                    if !done {
                        tokens.push(tok);
                    }
                    candidates.push((tokens, beam.1 + lp[tok], done));
                }
            }
            candidates.sort_by(|a, b| norm(b).total_cmp(&norm(a)).then_with(|| a.0.cmp(&b.0)));
            candidates.truncate(BEAM_WIDTH);
            beams = candidates;
        }
        let best = beams
            .iter()
            .max_by(|a, b| norm(a).total_cmp(&norm(b)).then_with(|| b.0.cmp(&a.0)))
            .expect("beam is never empty");
        Ok(best.0[1..].to_vec())
    }
}

fn check_layout(expected: &ParamStore, found: &ParamStore, what: &str) -> Result<()> {
    if expected.len() != found.len() {
        return Err(Error::Checkpoint(format!(
            "config expects {} {what} tensors, found {}",
            expected.len(),
            found.len()
        )));
    }
    for ((want, wt), (got, gt)) in expected.iter().zip(found.iter()) {
        if want != got || wt.shape() != gt.shape() {
            return Err(Error::Checkpoint(format!(
                "{what} mismatch: expected {want} {:?}, found {got} {:?}",
                wt.shape(),
                gt.shape()
            )));
        }
    }
    Ok(())
}

/// Encoder-side values for one context.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextViews {
    pub y_c: Vec<f64>,
    pub y_e: Vec<f64>,
    pub pooled_c: Vec<f64>,
    pub pooled_e: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{central_difference, max_relative_error};
    use crate::params::Bound;
    use crate::transformer::{decoder_stage_forward, AttentionMask};
    use rand::{Rng, SeedableRng};

    pub(crate) fn toy_config(variant: DecoderVariant) -> ModelConfig {
        let layer = LayerConfig {
            d_model: 8,
            d_emb: 8,
            heads: 2,
            d_ff: 16,
            layers_enc: 1,
            layers_dec_stage: 1,
            dropout: 0.0,
            max_len: 16,
        };
        let mut cfg = ModelConfig::new(layer, 20, 4, variant);
        cfg.content_classifier = ContentClassifier::Joint;
        cfg
    }

    struct Owned {
        context: Vec<usize>,
        context_valid: Vec<bool>,
        response_in: Vec<usize>,
        response_gold: Vec<usize>,
        response_valid: Vec<bool>,
        emotion: usize,
    }

    impl Owned {
        fn input(&self) -> ExampleInput<'_> {
            ExampleInput {
                context: &self.context,
                context_valid: &self.context_valid,
                response_in: &self.response_in,
                response_gold: &self.response_gold,
                response_valid: &self.response_valid,
                emotion: self.emotion,
            }
        }
    }

    fn toy_batch() -> Vec<Owned> {
        vec![
            Owned {
                context: vec![4, 7, 9, 12, 0],
                context_valid: vec![true, true, true, true, false],
                response_in: vec![SOS, 8, 11, 15],
                response_gold: vec![8, 11, 15, EOS],
                response_valid: vec![true; 4],
                emotion: 2,
            },
            Owned {
                context: vec![4, 10, 6, 5, 13],
                context_valid: vec![true; 5],
                response_in: vec![SOS, 17, 0, 0],
                response_gold: vec![17, EOS, 0, 0],
                response_valid: vec![true, true, false, false],
                emotion: 0,
            },
        ]
    }

    fn batch_loss(model: &CedualModel, batch: &[Owned]) -> f64 {
        batch
            .iter()
            .map(|ex| model.evaluate(&ex.input()).unwrap().losses.l_total)
            .sum::<f64>()
            / batch.len() as f64
    }

    #[test]
    fn full_model_gradcheck() {
        for variant in DecoderVariant::ALL {
            let mut model = CedualModel::new(toy_config(variant), 5).unwrap();
            let batch = toy_batch();
            let mut analytic = vec![0.0; model.params().num_values()];
            for ex in &batch {
                let grads = model.loss_and_grads(&ex.input(), None).unwrap().grads;
                for (a, g) in analytic.iter_mut().zip(grads.iter().flatten()) {
                    *a += g / batch.len() as f64;
                }
            }
            let x = model.params().flatten();
            let numeric = central_difference(&x, 1e-5, |p| {
                model.params_mut().assign_flat(p).unwrap();
                batch_loss(&model, &batch)
            });
            let (err, idx) = max_relative_error(&analytic, &numeric);
            eprintln!("{variant}: max rel err {err:e} at {idx}: {} vs {}", analytic[idx], numeric[idx]);
            assert!(err < 1e-4);
        }
    }

    fn with_ctx<R>(model: &CedualModel, trainable: bool, f: impl FnOnce(&mut Ctx<'_, '_>, &Bound<'_>) -> R) -> R {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, trainable);
        let mut ctx = Ctx::new(&mut tape, &bound, &model.config.layer, &model.pe);
        f(&mut ctx, &bound)
    }

    fn param_grad(model: &CedualModel, grads: &[Vec<f64>], name: &str) -> Vec<f64> {
        grads[model.params.position(name).unwrap()].clone()
    }

    #[test]
    fn view_shapes_and_distributions() {
        let layer = LayerConfig {
            d_model: 64,
            d_emb: 64,
            heads: 4,
            d_ff: 128,
            layers_enc: 2,
            layers_dec_stage: 1,
            dropout: 0.0,
            max_len: 16,
        };
        let model = CedualModel::new(ModelConfig::new(layer, 40, 32, DecoderVariant::Fcte), 1).unwrap();
        with_ctx(&model, false, |ctx, _| {
            let views = model.encode_dual(ctx, &[4, 9, 10, 11, 12, 13, 14], &[true; 7]).unwrap();
            assert_eq!(ctx.tape.shape(views.h_c), [7, 64]);
            assert_eq!(ctx.tape.shape(views.h_e), [7, 64]);
            for y in [views.y_c, views.y_e] {
                let v = ctx.tape.value(y);
                assert_eq!(v.len(), 32);
                assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        });
    }

    #[test]
    fn zero_heads_give_zero_views_and_uniform_predictions() {
        let mut model = CedualModel::new(toy_config(DecoderVariant::Fcte), 2).unwrap();
        for (name, t) in model.params_mut().iter_mut() {
            if name.starts_with("head.") || name.starts_with("classifier.") && name.ends_with(".b") {
                t.data_mut().fill(0.0);
            }
        }
        with_ctx(&model, false, |ctx, _| {
            let v = model.encode_dual(ctx, &[4, 7, 9], &[true; 3]).unwrap();
            assert!(ctx.tape.value(v.h_c).iter().all(|x| *x == 0.0));
            assert_eq!(ctx.tape.value(v.h_c), ctx.tape.value(v.h_e));
            assert_eq!(ctx.tape.value(v.y_c), &[0.25; 4]);
            assert_eq!(ctx.tape.value(v.y_c), ctx.tape.value(v.y_e));
        });
    }

    #[test]
    fn each_view_loss_reaches_only_its_own_head() {
        let model = CedualModel::new(toy_config(DecoderVariant::Fcte), 3).unwrap();
        let label = EmotionLabel::new(1, 4).unwrap();
        let grads_of = |pick: usize| {
            with_ctx(&model, true, |ctx, bound| {
                let v = model.encode_dual(ctx, &[4, 7, 9, 12], &[true; 4]).unwrap();
                let losses = model.disentanglement_loss(ctx.tape, &v, label).unwrap();
                let loss = [losses.0, losses.1][pick];
                ctx.tape.backward(loss).unwrap();
                bound.grads(ctx.tape)
            })
        };
        let nonzero = |g: Vec<f64>| g.iter().any(|x| *x != 0.0);
        let from_c = grads_of(0);
        assert!(param_grad(&model, &from_c, "head.emotion.w").iter().all(|x| *x == 0.0));
        assert!(nonzero(param_grad(&model, &from_c, "head.content.w")));
        assert!(nonzero(param_grad(&model, &from_c, "encoder.layer0.ff1.w")));
        let from_e = grads_of(1);
        assert!(param_grad(&model, &from_e, "head.content.w").iter().all(|x| *x == 0.0));
        assert!(nonzero(param_grad(&model, &from_e, "head.emotion.w")));
        assert!(nonzero(param_grad(&model, &from_e, "encoder.layer0.ff1.w")));
    }

    fn distribution(tape: &mut Tape<'_>, p: Vec<f64>) -> Var {
        tape.constant(Tensor::vector(p).unwrap())
    }

    /// A context whose class distributions are set by hand.
    fn rigged_context(tape: &mut Tape<'_>, y_c: Vec<f64>, y_e: Vec<f64>) -> DisentangledContext {
        let logits_e: Vec<f64> = y_e.iter().map(|p| p.max(1e-300).ln()).collect();
        let zero = tape.constant(Tensor::zeros(vec![1, 2]));
        DisentangledContext {
            h_c: zero,
            h_e: zero,
            pooled_c: zero,
            pooled_e: zero,
            logits_c: zero,
            logits_e: distribution(tape, logits_e),
            y_c: distribution(tape, y_c),
            y_e: distribution(tape, y_e),
            pad_mask: vec![true],
        }
    }

    #[test]
    fn disentanglement_extremes() {
        let layer = toy_config(DecoderVariant::Fcte).layer;
        let model = CedualModel::new(ModelConfig::new(layer, 20, 32, DecoderVariant::Fcte), 4).unwrap();
        let label = EmotionLabel::new(5, 32).unwrap();
        let mut one_hot = vec![0.0; 32];
        one_hot[5] = 1.0;
        let mut tape = Tape::new();
        let best = rigged_context(&mut tape, vec![1.0 / 32.0; 32], one_hot.clone());
        let (_, _, l_dis) = model.disentanglement_loss(&mut tape, &best, label).unwrap();
        assert!((tape.scalar(l_dis) + 32f64.ln()).abs() < 1e-12);
        let worst = rigged_context(&mut tape, one_hot, vec![1.0 / 32.0; 32]);
        let (_, _, l_dis) = model.disentanglement_loss(&mut tape, &worst, label).unwrap();
        assert!((tape.scalar(l_dis) - 32f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn disentanglement_matches_component_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = CedualModel::new(toy_config(DecoderVariant::Fcte), 5).unwrap();
        for _ in 0..50 {
            let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(0.01..1.0)).collect();
            let z: f64 = raw.iter().sum();
            let y_c: Vec<f64> = raw.iter().map(|r| r / z).collect();
            let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(0.01..1.0)).collect();
            let z: f64 = raw.iter().sum();
            let y_e: Vec<f64> = raw.iter().map(|r| r / z).collect();
            let e = rng.gen_range(0..4);
            let mut tape = Tape::new();
            let ctx = rigged_context(&mut tape, y_c.clone(), y_e.clone());
            let (c, em, dis) = model.disentanglement_loss(&mut tape, &ctx, EmotionLabel::new(e, 4).unwrap()).unwrap();
            let h: f64 = -y_c.iter().map(|p| p * p.ln()).sum::<f64>();
            let ce = -y_e[e].ln();
            assert!((tape.scalar(c) - h).abs() < 1e-12);
            assert!((tape.scalar(em) - ce).abs() < 1e-12);
            assert!((tape.scalar(dis) - (ce - h)).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let (v, k) = (20f64.ln(), 4f64.ln());
        let b = total_loss(v, k, 0.0, 1.0, 1.0);
        assert_eq!(b.l_dis, -k);
        assert_eq!(b.l_total, v - k);
    }

    /// Decoder output for `model` with the views of `context` replaced as
    /// `edit` says.
    fn decode_with(model: &CedualModel, edit: impl FnOnce(&mut Tape<'_>, &mut DisentangledContext)) -> Vec<f64> {
        with_ctx(model, false, |ctx, _| {
            let mut views = model.encode_dual(ctx, &[4, 8, 9, 13], &[true; 4]).unwrap();
            edit(ctx.tape, &mut views);
            let out = model.decode(ctx, &views, &[SOS, 7, 11], &[true; 3]).unwrap();
            ctx.tape.value(out).to_vec()
        })
    }

    fn noise(tape: &mut Tape<'_>, like: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = tape.shape(like).to_vec();
        let n = shape.iter().product();
        tape.constant(Tensor::new(shape, (0..n).map(|_| rng.gen_range(0.0..2.0)).collect()).unwrap())
    }

    #[test]
    fn single_stage_variants_read_only_their_view() {
        let content = CedualModel::new(toy_config(DecoderVariant::ContentOnly), 6).unwrap();
        let base = decode_with(&content, |_, _| {});
        assert_eq!(base, decode_with(&content, |t, v| v.h_e = noise(t, v.h_e, 1)));
        assert_ne!(base, decode_with(&content, |t, v| v.h_c = noise(t, v.h_c, 1)));

        let emotion = CedualModel::new(toy_config(DecoderVariant::EmotionOnly), 6).unwrap();
        let base = decode_with(&emotion, |_, _| {});
        assert_eq!(base, decode_with(&emotion, |t, v| v.h_c = noise(t, v.h_c, 2)));
        assert_ne!(base, decode_with(&emotion, |t, v| v.h_e = noise(t, v.h_e, 2)));
    }

    #[test]
    fn single_stage_delegates_to_the_decoder_stage() {
        let model = CedualModel::new(toy_config(DecoderVariant::ContentOnly), 7).unwrap();
        let direct = with_ctx(&model, false, |ctx, _| {
            let views = model.encode_dual(ctx, &[4, 8, 9, 13], &[true; 4]).unwrap();
            let embed = ctx.p("embed.token").unwrap();
            let emb = ctx.tape.gather(embed, &[SOS, 7, 11]).unwrap();
            let emb = ctx.add_positions(emb).unwrap();
            let mask = AttentionMask::combined(&[true; 3]);
            let out = decoder_stage_forward(ctx, views.h_c, &[true; 4], emb, &mask, "decoder.content").unwrap();
            ctx.tape.value(out).to_vec()
        });
        assert_eq!(direct, decode_with(&model, |_, _| {}));
    }

    #[test]
    fn two_stage_orders_share_one_code_path() {
        let fcte = CedualModel::new(toy_config(DecoderVariant::Fcte), 8).unwrap();
        let mut fetc = CedualModel::new(toy_config(DecoderVariant::Fetc), 8).unwrap();
        // Give FETC the FCTE weights under its own names.
        let renamed: Vec<(String, Tensor)> = fcte
            .params()
            .iter()
            .map(|(n, t)| (n.replace("decoder.fcte", "decoder.fetc"), t.clone()))
            .collect();
        for (name, t) in renamed {
            *fetc.params_mut().get_mut(&name).unwrap() = t;
        }
        assert_ne!(decode_with(&fcte, |_, _| {}), decode_with(&fetc, |_, _| {}));
        let swapped = decode_with(&fcte, |_, v| std::mem::swap(&mut v.h_c, &mut v.h_e));
        assert_eq!(swapped, decode_with(&fetc, |_, _| {}));
    }

    #[test]
    fn nulled_second_cross_attention_ignores_the_second_memory() {
        let mut model = CedualModel::new(toy_config(DecoderVariant::Fcte), 9).unwrap();
        for name in [
            "decoder.fcte2.layer0.cross_attn.v.w",
            "decoder.fcte2.layer0.cross_attn.v.b",
            "decoder.fcte2.layer0.cross_attn.o.b",
        ] {
            model.params_mut().get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let base = decode_with(&model, |_, _| {});
        let perturbed = decode_with(&model, |t, v| v.h_e = noise(t, v.h_e, 3));
        for (a, b) in base.iter().zip(&perturbed) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_ne!(base, decode_with(&model, |t, v| v.h_c = noise(t, v.h_c, 3)));
    }

    #[test]
    fn decoder_output_has_one_row_per_response_position() {
        let model = CedualModel::new(toy_config(DecoderVariant::Fetc), 10).unwrap();
        with_ctx(&model, false, |ctx, _| {
            let views = model.encode_dual(ctx, &[4, 8, 9], &[true; 3]).unwrap();
            let out = model.decode(ctx, &views, &[SOS, 7, 8, 9, 10], &[true; 5]).unwrap();
            assert_eq!(ctx.tape.shape(out), [5, 8]);
        });
    }

    #[test]
    fn generation_loss_cases() {
        let model = CedualModel::new(toy_config(DecoderVariant::Fcte), 11).unwrap();
        let mut tape = Tape::new();
        let uniform = tape.constant(Tensor::zeros(vec![3, 20]));
        let l = model.generation_loss(&mut tape, uniform, &[7, 8, EOS], &[true; 3]).unwrap();
        assert!((tape.scalar(l) - 20f64.ln()).abs() < 1e-12);

        let mut rigged = vec![0.0; 60];
        for (t, g) in [7, 8, EOS].iter().enumerate() {
            rigged[t * 20 + g] = 60.0;
        }
        let rigged = tape.constant(Tensor::new(vec![3, 20], rigged).unwrap());
        let l = model.generation_loss(&mut tape, rigged, &[7, 8, EOS], &[true; 3]).unwrap();
        assert!(tape.scalar(l) < 1e-20);

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data: Vec<f64> = (0..80).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let gold = [9, 4, 17, 0];
        let valid = [true, true, true, false];
        let logits = tape.constant(Tensor::new(vec![4, 20], data.clone()).unwrap());
        let l = model.generation_loss(&mut tape, logits, &gold, &valid).unwrap();
        let oracle = (0..3)
            .map(|t| {
                let row = &data[t * 20..(t + 1) * 20];
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                z.ln() - row[gold[t]]
            })
            .sum::<f64>()
            / 3.0;
        assert!((tape.scalar(l) - oracle).abs() < 1e-12);
    }

    #[test]
    fn prediction_tie_break_and_oracle() {
        let mut one_hot = vec![0.0; 8];
        one_hot[5] = 1.0;
        assert_eq!(predict_emotion(&one_hot).unwrap().index(), 5);
        let tie = [0.1, 0.0, 0.3, 0.0, 0.0, 0.0, 0.0, 0.3];
        assert_eq!(predict_emotion(&tie).unwrap().index(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let y: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut arg = 0;
            for i in 1..y.len() {
                if y[i] > y[arg] {
                    arg = i;
                }
            }
            assert_eq!(predict_emotion(&y).unwrap().index(), arg);
        }
    }

    #[test]
    fn greedy_generation_is_deterministic_and_bounded() {
        let model = CedualModel::new(toy_config(DecoderVariant::Fcte), 14).unwrap();
        for max_new in [1, 3, 7] {
            let a = model.generate(&[4, 9, 12], max_new, DecodeStrategy::Greedy).unwrap();
            assert_eq!(a, model.generate(&[4, 9, 12], max_new, DecodeStrategy::Greedy).unwrap());
            assert!(a.len() <= max_new);
            let b = model.generate(&[4, 9, 12], max_new, DecodeStrategy::Beam).unwrap();
            assert!(b.len() <= max_new);
        }
        assert!(model.generate(&[4, 9], 0, DecodeStrategy::Greedy).is_err());
    }

    #[test]
    fn adversarial_mode_splits_the_gradient() {
        // Classifier weights follow the adversary loss; every other weight
        // follows l_total with the classifier held fixed.
        let mut cfg = toy_config(DecoderVariant::Fcte);
        cfg.content_classifier = ContentClassifier::Adversarial;
        let mut model = CedualModel::new(cfg, 15).unwrap();
        let ex = &toy_batch()[0];
        let grads = model.loss_and_grads(&ex.input(), None).unwrap().grads;
        let names: Vec<String> = model.params().names().map(str::to_string).collect();
        for (i, name) in names.iter().enumerate() {
            if !(name.starts_with("classifier.") || name.starts_with("head.") || name == "encoder.layer0.ff2.w") {
                continue;
            }
            let x = model.params().get(name).unwrap().data().to_vec();
            let adversary = name.starts_with("classifier.content");
            let numeric = central_difference(&x, 1e-5, |p| {
                model.params_mut().get_mut(name).unwrap().data_mut().copy_from_slice(p);
                let g = model.loss_and_grads(&ex.input(), None).unwrap();
                if adversary {
                    g.adv.unwrap()
                } else {
                    g.losses.l_total
                }
            });
            model.params_mut().get_mut(name).unwrap().data_mut().copy_from_slice(&x);
            let (err, _) = max_relative_error(&grads[i], &numeric);
            assert!(err < 1e-5, "{name}: {err}");
        }
    }
}
