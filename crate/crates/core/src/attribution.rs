//! Token attribution for style classifiers.
//!
//! Five methods share one output contract: a non-negative score per token
//! that sums to one. Attention methods read the classifier's attention
//! weights directly; gradient methods differentiate the predicted-class
//! logit with respect to the token embeddings. The attention variant is
//! only trusted on a classifier trained with the conicity penalty, which
//! keeps hidden states spread out instead of collapsing into a narrow cone
//! where attention weights stop tracking token importance.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::corpus::{Corpus, Vocabulary, UNK_ID};
use crate::error::{Result, SmlmError};
use crate::nn::lstm::LstmClassifier;
use crate::nn::Adam;

/// Vectors with squared norm below this are treated as zero for cosine
/// computations.
pub const NORM_EPS: f64 = 1e-8;

/// Relative tolerance for the integrated-gradients completeness identity.
pub const IG_COMPLETENESS_RTOL: f64 = 0.01;

pub const DEFAULT_IG_STEPS: usize = 50;

/// Cosine similarity between a vector and the mean of a vector set.
/// Either side having near-zero norm yields 0.
pub fn alignment_to_mean(v: ArrayView1<f64>, set: ArrayView2<f64>) -> f64 {
    let n = set.nrows() as f64;
    let mean: Vec<f64> = (0..set.ncols())
        .map(|c| set.column(c).sum() / n)
        .collect();
    cosine(v, ArrayView1::from(&mean))
}

fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let sa: f64 = a.iter().map(|x| x * x).sum();
    let sb: f64 = b.iter().map(|x| x * x).sum();
    if sa < NORM_EPS * NORM_EPS || sb < NORM_EPS * NORM_EPS {
        return 0.0;
    }
    (dot / (sa * sb).sqrt()).clamp(-1.0, 1.0)
}

/// Mean alignment-to-mean over the rows of `set`. 1.0 means all vectors
/// point the same way; values near 0 mean they spread around the origin.
pub fn conicity(set: ArrayView2<f64>) -> f64 {
    let rows = set.nrows();
    assert!(rows > 0, "conicity of an empty set");
    let total: f64 = (0..rows)
        .map(|i| alignment_to_mean(set.row(i), set))
        .sum();
    total / rows as f64
}

/// Hyperparameters for LSTM classifier training.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Weight of the conicity penalty on hidden states; 0 trains a plain
    /// attention classifier.
    pub lambda_con: f64,
    /// Probability of replacing an input token with `<unk>` during
    /// training, which stops the classifier from leaning on a single
    /// token when several carry the label.
    pub token_dropout: f64,
    pub bidirectional: bool,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            embed_dim: 128,
            hidden_dim: 128,
            epochs: 10,
            lr: 1e-3,
            batch_size: 32,
            lambda_con: 10.0,
            token_dropout: 0.15,
            bidirectional: false,
            seed: 0,
        }
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_conicity: f64,
    pub dev_accuracy: f64,
    pub dev_conicity: f64,
}

/// A trained classifier together with the conicity weight it was trained
/// under, which gates which attribution methods may read its attention.
pub struct StyleClassifier {
    pub model: LstmClassifier,
    pub config: ClassifierConfig,
}

fn encode_corpus(corpus: &Corpus, vocab: &Vocabulary) -> Vec<(Vec<usize>, usize)> {
    corpus
        .examples
        .iter()
        .map(|ex| (vocab.encode(&ex.tokens), ex.label))
        .collect()
}

/// Argmax predictions for arbitrary-length inputs, batched by length.
pub fn predict_all(model: &LstmClassifier, inputs: &[Vec<usize>]) -> Vec<usize> {
    let mut preds = vec![0usize; inputs.len()];
    for group in crate::corpus::group_by_length(inputs.iter().map(Vec::len)) {
        let batch: Vec<&[usize]> = group.iter().map(|&i| inputs[i].as_slice()).collect();
        for (&i, p) in group.iter().zip(model.predict(&batch)) {
            preds[i] = p;
        }
    }
    preds
}

/// Fraction of examples classified into their recorded label.
pub fn classifier_accuracy(model: &LstmClassifier, data: &[(Vec<usize>, usize)]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let inputs: Vec<Vec<usize>> = data.iter().map(|(x, _)| x.clone()).collect();
    let preds = predict_all(model, &inputs);
    let hits = preds
        .iter()
        .zip(data)
        .filter(|(p, (_, y))| **p == *y)
        .count();
    hits as f64 / data.len() as f64
}

/// Mean conicity of per-example hidden-state sets.
pub fn mean_hidden_conicity(model: &LstmClassifier, inputs: &[Vec<usize>]) -> f64 {
    if inputs.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for group in crate::corpus::group_by_length(inputs.iter().map(Vec::len)) {
        let tape = Tape::new();
        let bound = model.store.bind(&tape);
        let batch: Vec<&[usize]> = group.iter().map(|&i| inputs[i].as_slice()).collect();
        let out = model.forward(&tape, &bound, &batch);
        let steps: Vec<_> = out.hidden.iter().map(|h| h.value()).collect();
        let state_dim = steps[0].ncols();
        for (b, _) in group.iter().enumerate() {
            let mut set = Array2::zeros((steps.len(), state_dim));
            for (t, s) in steps.iter().enumerate() {
                set.row_mut(t).assign(&s.row(b));
            }
            total += conicity(set.view());
        }
    }
    total / inputs.len() as f64
}

/// Differentiable conicity of the batch's hidden states, averaged over
/// timesteps and examples.
fn conicity_loss<'t>(hidden: &[Var<'t>]) -> Var<'t> {
    let steps = hidden.len() as f64;
    let mut mean = hidden[0];
    for &h in &hidden[1..] {
        mean = mean + h;
    }
    let mean = mean.scale(1.0 / steps);
    let mean_norm = mean.square().sum_cols().add_scalar(1e-12).sqrt();
    let cosines: Vec<Var<'t>> = hidden
        .iter()
        .map(|&h| {
            let dot = (h * mean).sum_cols();
            let h_norm = h.square().sum_cols().add_scalar(1e-12).sqrt();
            dot.div(h_norm * mean_norm)
        })
        .collect();
    Var::concat_cols(&cosines).mean_all()
}

/// Trains an attention LSTM classifier with an optional conicity penalty.
/// Training order, dropout, and initialization all derive from
/// `config.seed`, so equal inputs give bit-identical models.
pub fn train_classifier(
    train: &Corpus,
    dev: &Corpus,
    vocab: &Vocabulary,
    config: &ClassifierConfig,
) -> Result<(StyleClassifier, Vec<EpochStats>)> {
    if train.is_empty() {
        return Err(SmlmError::InvalidConfig("empty training corpus".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut model = LstmClassifier::new(
        vocab.len(),
        config.embed_dim,
        config.hidden_dim,
        train.n_labels(),
        config.bidirectional,
        &mut rng,
    );
    let train_data = encode_corpus(train, vocab);
    let dev_data = encode_corpus(dev, vocab);
    let dev_inputs: Vec<Vec<usize>> = dev_data.iter().map(|(x, _)| x.clone()).collect();
    let mut opt = Adam::new(config.lr);
    let indices = model.store.all_indices();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        order.shuffle(&mut rng);
        // Fresh dropout pattern per epoch.
        let dropped: Vec<Vec<usize>> = train_data
            .iter()
            .map(|(x, _)| {
                x.iter()
                    .map(|&id| {
                        if config.token_dropout > 0.0
                            && rng.random_range(0.0..1.0) < config.token_dropout
                        {
                            UNK_ID
                        } else {
                            id
                        }
                    })
                    .collect()
            })
            .collect();

        let mut loss_sum = 0.0;
        let mut conicity_sum = 0.0;
        let mut seen = 0usize;
        for group in crate::corpus::group_by_length(order.iter().map(|&i| train_data[i].0.len()))
        {
            for chunk in group.chunks(config.batch_size) {
                let ids: Vec<usize> = chunk.iter().map(|&k| order[k]).collect();
                let batch: Vec<&[usize]> = ids.iter().map(|&i| dropped[i].as_slice()).collect();
                let targets: Vec<usize> = ids.iter().map(|&i| train_data[i].1).collect();

                let tape = Tape::new();
                let bound = model.store.bind(&tape);
                let out = model.forward(&tape, &bound, &batch);
                let ce = out
                    .logits
                    .cross_entropy_rows(&targets, &vec![1.0; targets.len()]);
                let con = conicity_loss(&out.hidden);
                let loss = if config.lambda_con != 0.0 {
                    ce + con.scale(config.lambda_con)
                } else {
                    ce
                };
                let loss_val = loss.value()[[0, 0]];
                if !loss_val.is_finite() {
                    return Err(SmlmError::Diverged(format!(
                        "classifier loss became {loss_val} at epoch {epoch}"
                    )));
                }
                loss_sum += ce.value()[[0, 0]] * ids.len() as f64;
                conicity_sum += con.value()[[0, 0]] * ids.len() as f64;
                seen += ids.len();

                let mut grads = tape.backward(loss);
                let updates = model.store.collect_grads(&bound, &mut grads, &indices);
                drop(grads);
                drop(tape);
                opt.step(&mut model.store, &updates);
            }
        }
        log.push(EpochStats {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_conicity: conicity_sum / seen as f64,
            dev_accuracy: classifier_accuracy(&model, &dev_data),
            dev_conicity: mean_hidden_conicity(&model, &dev_inputs),
        });
    }
    if !model.store.all_finite() {
        return Err(SmlmError::Diverged("non-finite parameters".into()));
    }
    Ok((
        StyleClassifier {
            model,
            config: config.clone(),
        },
        log,
    ))
}

/// Anything that can map token ids to embeddings and embeddings to class
/// logits, keeping the path differentiable. Gradient attributions are
/// generic over this so they can be checked against a linear model with a
/// closed-form answer.
pub trait Differentiable {
    fn embed(&self, tokens: &[usize]) -> Array2<f64>;
    /// Class logits (`1×n_classes`) from an `n×embed_dim` variable.
    fn class_logits<'t>(&self, tape: &'t Tape, emb: Var<'t>) -> Var<'t>;
}

impl Differentiable for StyleClassifier {
    fn embed(&self, tokens: &[usize]) -> Array2<f64> {
        let table = &self.model.store.params[self.model.embedding].value;
        let mut out = Array2::zeros((tokens.len(), self.model.embed_dim));
        for (i, &t) in tokens.iter().enumerate() {
            out.row_mut(i).assign(&table.row(t));
        }
        out
    }

    fn class_logits<'t>(&self, tape: &'t Tape, emb: Var<'t>) -> Var<'t> {
        let bound = self.model.store.bind(tape);
        let n = emb.dim().0;
        let steps: Vec<Var<'t>> = (0..n).map(|t| emb.gather_rows(&[t])).collect();
        self.model.forward_embedded(tape, &bound, steps).logits
    }
}

fn argmax(row: ArrayView1<f64>) -> usize {
    row.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap()
}

/// Predicted class from raw embeddings.
pub fn predict_from_embeddings<M: Differentiable>(model: &M, emb: &Array2<f64>) -> usize {
    let tape = Tape::new();
    let var = tape.leaf(emb.clone());
    let logits = model.class_logits(&tape, var);
    argmax(logits.value().row(0))
}

/// One attribution vector plus quality diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Attribution {
    /// Non-negative, sums to one.
    pub scores: Vec<f64>,
    /// True when the raw scores had no mass and a uniform vector was
    /// substituted.
    pub uniform_fallback: bool,
    /// Completeness diagnostics, present for integrated gradients only.
    pub completeness: Option<Completeness>,
}

/// How well the signed integrated-gradient sums reproduce the logit
/// difference between the input and the zero baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Completeness {
    pub attribution_sum: f64,
    pub logit_delta: f64,
    pub gap: f64,
    pub within_tolerance: bool,
}

fn normalize(raw: Vec<f64>) -> (Vec<f64>, bool) {
    let total: f64 = raw.iter().sum();
    let n = raw.len();
    if total < NORM_EPS {
        (vec![1.0 / n as f64; n], true)
    } else {
        (raw.into_iter().map(|v| v / total).collect(), false)
    }
}

fn attribution_from_raw(raw: Vec<f64>) -> Attribution {
    let (scores, uniform_fallback) = normalize(raw);
    Attribution {
        scores,
        uniform_fallback,
        completeness: None,
    }
}

/// Gradient of the predicted-class logit with respect to each embedding
/// row.
pub fn embedding_gradient<M: Differentiable>(
    model: &M,
    emb: &Array2<f64>,
    class: usize,
) -> Array2<f64> {
    let tape = Tape::new();
    let var = tape.leaf(emb.clone());
    let logits = model.class_logits(&tape, var);
    let root = logits.slice_cols(class, class + 1);
    let grads = tape.backward(root);
    grads
        .get(var)
        .expect("embedding participates in the logit")
        .clone()
}

/// L2 norm of the predicted-class logit gradient at each token.
pub fn vanilla_gradients<M: Differentiable>(model: &M, tokens: &[usize]) -> Attribution {
    let emb = model.embed(tokens);
    let class = predict_from_embeddings(model, &emb);
    let grad = embedding_gradient(model, &emb, class);
    let raw: Vec<f64> = grad
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    attribution_from_raw(raw)
}

/// Absolute inner product of the logit gradient and the embedding at each
/// token.
pub fn gradients_times_input<M: Differentiable>(model: &M, tokens: &[usize]) -> Attribution {
    let emb = model.embed(tokens);
    let class = predict_from_embeddings(model, &emb);
    let grad = embedding_gradient(model, &emb, class);
    let raw: Vec<f64> = grad
        .rows()
        .into_iter()
        .zip(emb.rows())
        .map(|(g, x)| g.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>().abs())
        .collect();
    attribution_from_raw(raw)
}

/// Value of one class logit at raw embeddings, for finite-difference
/// checks against the analytic gradients.
pub fn class_logit_value<M: Differentiable>(model: &M, emb: &Array2<f64>, class: usize) -> f64 {
    let tape = Tape::new();
    let var = tape.leaf(emb.clone());
    let logits = model.class_logits(&tape, var);
    logits.value()[[0, class]]
}

/// Path integral of gradients from the zero embedding to the input,
/// midpoint rule with `steps` segments. The signed per-token sums are
/// checked against the completeness identity before taking magnitudes.
pub fn integrated_gradients<M: Differentiable>(
    model: &M,
    tokens: &[usize],
    steps: usize,
) -> Attribution {
    assert!(steps > 0);
    let emb = model.embed(tokens);
    let class = predict_from_embeddings(model, &emb);
    let mut signed = vec![0.0f64; tokens.len()];
    for k in 0..steps {
        let alpha = (k as f64 + 0.5) / steps as f64;
        let grad = embedding_gradient(model, &(&emb * alpha), class);
        for (i, (g, x)) in grad.rows().into_iter().zip(emb.rows()).enumerate() {
            signed[i] += g.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>() / steps as f64;
        }
    }
    let logit_delta = class_logit_value(model, &emb, class)
        - class_logit_value(model, &Array2::zeros(emb.dim()), class);
    let attribution_sum: f64 = signed.iter().sum();
    let gap = (attribution_sum - logit_delta).abs();
    let within_tolerance = gap <= IG_COMPLETENESS_RTOL * logit_delta.abs().max(NORM_EPS);
    if !within_tolerance {
        log::warn!(
            "integrated gradients completeness gap {gap:.3e} exceeds \
             {IG_COMPLETENESS_RTOL} of logit delta {logit_delta:.3e}"
        );
    }
    let raw: Vec<f64> = signed.iter().map(|v| v.abs()).collect();
    let mut attribution = attribution_from_raw(raw);
    attribution.completeness = Some(Completeness {
        attribution_sum,
        logit_delta,
        gap,
        within_tolerance,
    });
    attribution
}

/// Attention weights of the classifier, which already form a distribution
/// over tokens.
pub fn attention_scores(classifier: &StyleClassifier, tokens: &[usize]) -> Attribution {
    let tape = Tape::new();
    let bound = classifier.model.store.bind(&tape);
    let out = classifier.model.forward(&tape, &bound, &[tokens]);
    let alpha = out.alpha.value();
    attribution_from_raw(alpha.row(0).to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMethod {
    /// Attention of the conicity-regularized classifier.
    EncoderAttention,
    /// Attention of a plain classifier.
    VanillaAttention,
    VanillaGradients,
    GradientsTimesInput,
    IntegratedGradients,
}

impl AttributionMethod {
    pub const ALL: [AttributionMethod; 5] = [
        AttributionMethod::EncoderAttention,
        AttributionMethod::VanillaAttention,
        AttributionMethod::VanillaGradients,
        AttributionMethod::GradientsTimesInput,
        AttributionMethod::IntegratedGradients,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ea" | "encoder_attention" => Ok(AttributionMethod::EncoderAttention),
            "va" | "vanilla_attention" => Ok(AttributionMethod::VanillaAttention),
            "vg" | "vanilla_gradients" => Ok(AttributionMethod::VanillaGradients),
            "gxx" | "gradients_times_input" => Ok(AttributionMethod::GradientsTimesInput),
            "ig" | "integrated_gradients" => Ok(AttributionMethod::IntegratedGradients),
            other => Err(SmlmError::InvalidConfig(format!(
                "unknown attribution method `{other}` (expected ea, va, vg, gxx, or ig)"
            ))),
        }
    }

    pub fn short_name(&self) -> &'static str {
        match self {
            AttributionMethod::EncoderAttention => "ea",
            AttributionMethod::VanillaAttention => "va",
            AttributionMethod::VanillaGradients => "vg",
            AttributionMethod::GradientsTimesInput => "gxx",
            AttributionMethod::IntegratedGradients => "ig",
        }
    }
}

/// Scores one sentence with the requested method. Attention methods are
/// tied to the training regime of the classifier: reading attention off a
/// model trained without the conicity penalty (or vice versa) is rejected
/// rather than silently producing untrustworthy scores.
pub fn attribute(
    classifier: &StyleClassifier,
    method: AttributionMethod,
    tokens: &[usize],
    ig_steps: usize,
) -> Result<Attribution> {
    if tokens.is_empty() {
        return Err(SmlmError::ShapeMismatch("empty token sequence".into()));
    }
    match method {
        AttributionMethod::EncoderAttention => {
            if classifier.config.lambda_con <= 0.0 {
                return Err(SmlmError::Unsupported(
                    "encoder attention requires a conicity-regularized classifier".into(),
                ));
            }
            Ok(attention_scores(classifier, tokens))
        }
        AttributionMethod::VanillaAttention => {
            if classifier.config.lambda_con != 0.0 {
                return Err(SmlmError::Unsupported(
                    "vanilla attention requires a classifier trained without the conicity \
                     penalty"
                        .into(),
                ));
            }
            Ok(attention_scores(classifier, tokens))
        }
        AttributionMethod::VanillaGradients => Ok(vanilla_gradients(classifier, tokens)),
        AttributionMethod::GradientsTimesInput => Ok(gradients_times_input(classifier, tokens)),
        AttributionMethod::IntegratedGradients => {
            Ok(integrated_gradients(classifier, tokens, ig_steps))
        }
    }
}

/// Attribution vectors for a whole corpus, index-aligned with it.
pub fn attribute_corpus_seq(
    classifier: &StyleClassifier,
    method: AttributionMethod,
    corpus: &Corpus,
    vocab: &Vocabulary,
    ig_steps: usize,
) -> Result<Vec<Attribution>> {
    corpus
        .examples
        .iter()
        .map(|ex| attribute(classifier, method, &vocab.encode(&ex.tokens), ig_steps))
        .collect()
}

/// Data-parallel corpus attribution when the `parallel` feature is on.
/// Every sentence builds its own tape, so the shared classifier is only
/// read; output order matches the corpus either way.
#[cfg(feature = "parallel")]
pub fn attribute_corpus(
    classifier: &StyleClassifier,
    method: AttributionMethod,
    corpus: &Corpus,
    vocab: &Vocabulary,
    ig_steps: usize,
) -> Result<Vec<Attribution>> {
    use rayon::prelude::*;
    corpus
        .examples
        .par_iter()
        .map(|ex| attribute(classifier, method, &vocab.encode(&ex.tokens), ig_steps))
        .collect()
}

#[cfg(not(feature = "parallel"))]
pub fn attribute_corpus(
    classifier: &StyleClassifier,
    method: AttributionMethod,
    corpus: &Corpus,
    vocab: &Vocabulary,
    ig_steps: usize,
) -> Result<Vec<Attribution>> {
    attribute_corpus_seq(classifier, method, corpus, vocab, ig_steps)
}

#[derive(Serialize, Deserialize)]
struct ClassifierMeta {
    kind: String,
    vocab_size: usize,
    n_classes: usize,
    config: ClassifierConfig,
}

impl StyleClassifier {
    /// Writes `weights.bin` and `meta.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| SmlmError::io(dir, e))?;
        let meta = ClassifierMeta {
            kind: "lstm_attention_classifier".into(),
            vocab_size: self.model.vocab_size,
            n_classes: self.model.n_classes,
            config: self.config.clone(),
        };
        let meta_path = dir.join("meta.json");
        fs::write(
            &meta_path,
            serde_json::to_string_pretty(&meta).expect("meta serializes"),
        )
        .map_err(|e| SmlmError::io(&meta_path, e))?;
        self.model.store.save(&dir.join("weights.bin"))
    }

    pub fn load(dir: &Path) -> Result<StyleClassifier> {
        let meta_path = dir.join("meta.json");
        let meta_text =
            fs::read_to_string(&meta_path).map_err(|e| SmlmError::io(&meta_path, e))?;
        let meta: ClassifierMeta =
            serde_json::from_str(&meta_text).map_err(|e| SmlmError::CorruptedArtifact {
                path: meta_path.clone(),
                reason: e.to_string(),
            })?;
        if meta.kind != "lstm_attention_classifier" {
            return Err(SmlmError::CorruptedArtifact {
                path: meta_path,
                reason: format!("unexpected model kind `{}`", meta.kind),
            });
        }
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut model = LstmClassifier::new(
            meta.vocab_size,
            meta.config.embed_dim,
            meta.config.hidden_dim,
            meta.n_classes,
            meta.config.bidirectional,
            &mut rng,
        );
        model.store.load_into(&dir.join("weights.bin"))?;
        Ok(StyleClassifier {
            model,
            config: meta.config,
        })
    }
}
