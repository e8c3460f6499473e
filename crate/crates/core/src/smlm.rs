//! Masked reconstruction model with style control codes.
//!
//! Input to the encoder is the masked sentence with two code tokens
//! appended after it: a source code for the style the sentence came from
//! and a destination code for the style it should read as. Codes are
//! ordinary vocabulary entries, receive position embeddings like any other
//! row, and are excluded from both the reconstruction loss and the style
//! head's mean pooling.
//!
//! Training runs in two stages. Bootstrap teaches reconstruction with the
//! two codes equal, so the model learns to fill masks consistently with
//! the style the codes name. Fine-tuning adds an adversarial game: for
//! each sentence a second pass with the destination code flipped produces
//! a soft output distribution at the masked positions, which is embedded
//! and re-encoded so a style head can judge it; the encoder is pushed to
//! make that judgment favor the destination style while the head is pushed
//! to resist.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::corpus::{Corpus, MaskedExample, Vocabulary};
use crate::error::{Result, SmlmError};
use crate::nn::transformer::EncoderLayer;
use crate::nn::{clip_global_norm, Adam, ParamStore};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmlmConfig {
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub bootstrap_epochs: usize,
    pub finetune_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Weight of the adversarial style loss on the encoder.
    pub lambda_sta: f64,
    /// Share of the adversarial gradient applied (negated) to the style
    /// head, letting it resist the encoder.
    pub head_adv_ratio: f64,
    /// Softmax temperature for the soft output distribution handed to the
    /// style head during fine-tuning. After bootstrap the output
    /// distributions are nearly one-hot, which starves the adversarial
    /// pass of gradient; dividing the logits by a temperature above one
    /// restores flow without changing what the model decodes.
    pub adv_temperature: f64,
    /// Global-norm gradient clip applied to every update in both stages.
    pub clip_norm: f64,
    /// Restrict the reconstruction loss to masked positions. Off by
    /// default: training against every position also teaches the identity
    /// copy that transfer relies on.
    pub masked_loss_only: bool,
    pub seed: u64,
}

impl Default for SmlmConfig {
    fn default() -> Self {
        SmlmConfig {
            model_dim: 64,
            n_layers: 2,
            n_heads: 8,
            ff_dim: 256,
            max_len: 64,
            bootstrap_epochs: 15,
            finetune_epochs: 1,
            lr: 1e-3,
            // Small batches mean many clipped optimizer steps per epoch,
            // which is what lets the single default fine-tune epoch move
            // the model.
            batch_size: 4,
            lambda_sta: 1.0,
            head_adv_ratio: 1.0,
            adv_temperature: 1.0,
            clip_norm: 1e-3,
            masked_loss_only: false,
            seed: 0,
        }
    }
}

/// Transformer encoder with tied input/output token embeddings and a style
/// classification head.
pub struct Smlm {
    pub store: ParamStore,
    pub config: SmlmConfig,
    pub vocab_size: usize,
    pub n_styles: usize,
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<EncoderLayer>,
    out_bias: usize,
    head_w: usize,
    head_b: usize,
}

/// Outputs of one sentence forward pass.
pub struct SmlmForward<'t> {
    /// `n×vocab` logits for the sentence positions (codes excluded).
    pub token_logits: Var<'t>,
    /// `n×model_dim` last-layer states of the sentence positions.
    pub token_states: Var<'t>,
    /// `1×n_styles` logits from the head over the mean token state.
    pub style_logits: Var<'t>,
}

impl Smlm {
    pub fn new(vocab_size: usize, n_styles: usize, config: &SmlmConfig) -> Result<Smlm> {
        if config.model_dim % config.n_heads != 0 {
            return Err(SmlmError::InvalidConfig(format!(
                "model dim {} not divisible by {} heads",
                config.model_dim, config.n_heads
            )));
        }
        if !(config.adv_temperature.is_finite() && config.adv_temperature > 0.0) {
            return Err(SmlmError::InvalidConfig(format!(
                "soft-output temperature must be positive and finite, got {}",
                config.adv_temperature
            )));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.model_dim;
        let tok_emb = store.add_xavier("tok_emb", vocab_size, d, &mut rng);
        let pos_emb = store.add_xavier("pos_emb", config.max_len, d, &mut rng);
        let layers = (0..config.n_layers)
            .map(|l| {
                EncoderLayer::new(
                    &mut store,
                    &format!("layer{l}"),
                    d,
                    config.n_heads,
                    config.ff_dim,
                    &mut rng,
                )
            })
            .collect();
        let out_bias = store.add_zeros("out_bias", 1, vocab_size);
        let head_w = store.add_xavier("head.w", d, n_styles, &mut rng);
        let head_b = store.add_zeros("head.b", 1, n_styles);
        Ok(Smlm {
            store,
            config: config.clone(),
            vocab_size,
            n_styles,
            tok_emb,
            pos_emb,
            layers,
            out_bias,
            head_w,
            head_b,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.total_len()
    }

    /// Parameter indices of the encoder body (everything but the head).
    pub fn body_indices(&self) -> Vec<usize> {
        (0..self.store.params.len())
            .filter(|i| *i != self.head_w && *i != self.head_b)
            .collect()
    }

    pub fn head_indices(&self) -> Vec<usize> {
        vec![self.head_w, self.head_b]
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(SmlmError::ShapeMismatch("empty sentence".into()));
        }
        if n + 2 > self.config.max_len {
            return Err(SmlmError::ShapeMismatch(format!(
                "sentence of {n} tokens plus codes exceeds max length {}",
                self.config.max_len
            )));
        }
        Ok(())
    }

    /// Encodes embedding rows (sentence plus the two code rows) and applies
    /// output projections. `rows` must already include position information.
    fn encode<'t>(&self, bound: &[Var<'t>], x: Var<'t>, n: usize) -> SmlmForward<'t> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(bound, h);
        }
        let token_states = h.gather_rows(&(0..n).collect::<Vec<_>>());
        let token_logits = token_states
            .matmul(bound[self.tok_emb].t())
            .add_row(bound[self.out_bias]);
        let mean_state = token_states.sum_rows().scale(1.0 / n as f64);
        let style_logits = mean_state
            .matmul(bound[self.head_w])
            .add_row(bound[self.head_b]);
        SmlmForward {
            token_logits,
            token_states,
            style_logits,
        }
    }

    /// Embeds `ids` (sentence tokens) with `src`/`dst` codes appended,
    /// adds position embeddings, and encodes.
    pub fn forward<'t>(
        &self,
        bound: &[Var<'t>],
        ids: &[usize],
        vocab: &Vocabulary,
        src: usize,
        dst: usize,
    ) -> Result<SmlmForward<'t>> {
        let n = ids.len();
        self.check_len(n)?;
        let mut rows: Vec<usize> = ids.to_vec();
        rows.push(vocab.src_code(src));
        rows.push(vocab.dst_code(dst));
        let emb = bound[self.tok_emb].gather_rows(&rows);
        let pos = bound[self.pos_emb].gather_rows(&(0..n + 2).collect::<Vec<_>>());
        Ok(self.encode(bound, emb + pos, n))
    }

    /// Forward pass without control codes, for the style head: the head
    /// must judge the text alone. Handing it a destination code would leak
    /// the expected answer into its input and let the encoder satisfy the
    /// adversarial objective by reading the code instead of rewriting
    /// tokens.
    fn forward_uncond<'t>(&self, bound: &[Var<'t>], ids: &[usize]) -> Result<SmlmForward<'t>> {
        let n = ids.len();
        self.check_len(n)?;
        let emb = bound[self.tok_emb].gather_rows(ids);
        let pos = bound[self.pos_emb].gather_rows(&(0..n).collect::<Vec<_>>());
        Ok(self.encode(bound, emb + pos, n))
    }

    /// Forward pass whose sentence rows are caller-supplied embedding
    /// variables (the soft adversarial pass); like [`Smlm::forward_uncond`]
    /// it appends no codes, so style information can only flow through the
    /// rows themselves.
    fn forward_soft<'t>(&self, bound: &[Var<'t>], sentence_rows: Var<'t>) -> SmlmForward<'t> {
        let n = sentence_rows.dim().0;
        let pos = bound[self.pos_emb].gather_rows(&(0..n).collect::<Vec<_>>());
        self.encode(bound, sentence_rows + pos, n)
    }

    /// Fills one masked sentence toward style `dst`. Unmasked positions are
    /// copied through verbatim; masked positions take the highest-scoring
    /// ordinary token. `redecode` instead re-predicts every position.
    pub fn transfer(
        &self,
        vocab: &Vocabulary,
        masked: &MaskedExample,
        dst: usize,
        redecode: bool,
    ) -> Result<Vec<String>> {
        let ids = vocab.encode(&masked.tokens);
        let tape = Tape::new();
        let bound = self.store.bind(&tape);
        let out = self.forward(&bound, &ids, vocab, masked.label, dst)?;
        let logits = out.token_logits.value();
        let first_word = vocab.first_word_id();
        let mut tokens = masked.tokens.clone();
        for (i, row) in logits.rows().into_iter().enumerate() {
            let predict = redecode || masked.mask_positions.contains(&i);
            if !predict {
                continue;
            }
            // Restrict fills to ordinary tokens: emitting pad, unk, mask,
            // or a control code would not be text.
            let best = (first_word..self.vocab_size)
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .expect("non-empty word range");
            tokens[i] = vocab.token(best).to_string();
        }
        Ok(tokens)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| SmlmError::io(dir, e))?;
        let meta = SmlmMeta {
            kind: "masked_style_encoder".into(),
            vocab_size: self.vocab_size,
            n_styles: self.n_styles,
            config: self.config.clone(),
        };
        let meta_path = dir.join("config.json");
        fs::write(
            &meta_path,
            serde_json::to_string_pretty(&meta).expect("meta serializes"),
        )
        .map_err(|e| SmlmError::io(&meta_path, e))?;
        self.store.save(&dir.join("weights.bin"))
    }

    pub fn load(dir: &Path) -> Result<Smlm> {
        let meta_path = dir.join("config.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| SmlmError::io(&meta_path, e))?;
        let meta: SmlmMeta =
            serde_json::from_str(&text).map_err(|e| SmlmError::CorruptedArtifact {
                path: meta_path.clone(),
                reason: e.to_string(),
            })?;
        if meta.kind != "masked_style_encoder" {
            return Err(SmlmError::CorruptedArtifact {
                path: meta_path,
                reason: format!("unexpected model kind `{}`", meta.kind),
            });
        }
        let mut model = Smlm::new(meta.vocab_size, meta.n_styles, &meta.config)?;
        model.store.load_into(&dir.join("weights.bin"))?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct SmlmMeta {
    kind: String,
    vocab_size: usize,
    n_styles: usize,
    config: SmlmConfig,
}

/// A masked sentence paired with its original tokens, validated.
struct TrainPair {
    masked_ids: Vec<usize>,
    original_ids: Vec<usize>,
    mask_positions: Vec<usize>,
    label: usize,
}

fn build_pairs(
    masked: &[MaskedExample],
    originals: &Corpus,
    vocab: &Vocabulary,
) -> Result<Vec<TrainPair>> {
    if masked.len() != originals.examples.len() {
        return Err(SmlmError::ShapeMismatch(format!(
            "{} masked examples vs {} originals",
            masked.len(),
            originals.examples.len()
        )));
    }
    masked
        .iter()
        .zip(&originals.examples)
        .enumerate()
        .map(|(i, (m, o))| {
            if m.tokens.len() != o.tokens.len() {
                return Err(SmlmError::ShapeMismatch(format!(
                    "example {i}: masked length {} vs original {}",
                    m.tokens.len(),
                    o.tokens.len()
                )));
            }
            if m.label != o.label {
                return Err(SmlmError::ShapeMismatch(format!(
                    "example {i}: masked label {} vs original {}",
                    m.label, o.label
                )));
            }
            for (pos, (mt, ot)) in m.tokens.iter().zip(&o.tokens).enumerate() {
                let listed = m.mask_positions.contains(&pos);
                if listed != (mt == crate::corpus::MASK_TOKEN) || (!listed && mt != ot) {
                    return Err(SmlmError::ShapeMismatch(format!(
                        "example {i}: masked text disagrees with original at position {pos}"
                    )));
                }
            }
            Ok(TrainPair {
                masked_ids: vocab.encode(&m.tokens),
                original_ids: vocab.encode(&o.tokens),
                mask_positions: m.mask_positions.clone(),
                label: m.label,
            })
        })
        .collect()
}

fn loss_weights(pair: &TrainPair, masked_only: bool) -> Vec<f64> {
    if masked_only {
        let mut w = vec![0.0; pair.masked_ids.len()];
        for &p in &pair.mask_positions {
            w[p] = 1.0;
        }
        // A fully unmasked sentence still contributes the identity copy.
        if pair.mask_positions.is_empty() {
            w.fill(1.0);
        }
        w
    } else {
        vec![1.0; pair.masked_ids.len()]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapEpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// Classification loss of the style head, trained alongside bootstrap
    /// on head-only updates.
    pub train_head_loss: f64,
    pub dev_masked_accuracy: f64,
    pub dev_unmasked_accuracy: f64,
}

/// Token-level reconstruction accuracy on masked and unmasked positions,
/// decoding with the source style on both codes.
pub fn reconstruction_accuracy(
    model: &Smlm,
    masked: &[MaskedExample],
    originals: &Corpus,
    vocab: &Vocabulary,
) -> Result<(f64, f64)> {
    let pairs = build_pairs(masked, originals, vocab)?;
    let mut masked_hits = 0usize;
    let mut masked_total = 0usize;
    let mut plain_hits = 0usize;
    let mut plain_total = 0usize;
    for pair in &pairs {
        let tape = Tape::new();
        let bound = model.store.bind(&tape);
        let out = model.forward(
            &bound,
            &pair.masked_ids,
            vocab,
            pair.label,
            pair.label,
        )?;
        let logits = out.token_logits.value();
        for (i, row) in logits.rows().into_iter().enumerate() {
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(id, _)| id)
                .unwrap();
            let hit = (pred == pair.original_ids[i]) as usize;
            if pair.mask_positions.contains(&i) {
                masked_hits += hit;
                masked_total += 1;
            } else {
                plain_hits += hit;
                plain_total += 1;
            }
        }
    }
    let ratio = |h: usize, t: usize| if t == 0 { 1.0 } else { h as f64 / t as f64 };
    Ok((
        ratio(masked_hits, masked_total),
        ratio(plain_hits, plain_total),
    ))
}

/// Learning-rate multiplier for the style head's auxiliary optimizer during
/// bootstrap.
const HEAD_BOOTSTRAP_LR_BOOST: f64 = 10.0;

/// Stage one: reconstruction with source and destination codes equal. The
/// style head rides along on head-only updates from a classification pass
/// over the original sentences, so it arrives at fine-tuning already able
/// to judge; the encoder body sees reconstruction gradients only, exactly
/// as if the head were absent.
pub fn bootstrap_train(
    model: &mut Smlm,
    masked_train: &[MaskedExample],
    train: &Corpus,
    masked_dev: &[MaskedExample],
    dev: &Corpus,
    vocab: &Vocabulary,
) -> Result<Vec<BootstrapEpochStats>> {
    let pairs = build_pairs(masked_train, train, vocab)?;
    if pairs.is_empty() {
        return Err(SmlmError::InvalidConfig("empty training set".into()));
    }
    let config = model.config.clone();
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut opt = Adam::new(config.lr);
    // The head must be a competent judge by the end of bootstrap while every
    // update stays under the shared clip threshold, so its auxiliary
    // optimizer runs hotter than the body's.
    let mut opt_head = Adam::new(config.lr * HEAD_BOOTSTRAP_LR_BOOST);
    let body = model.body_indices();
    let head = model.head_indices();
    let mut log = Vec::with_capacity(config.bootstrap_epochs);

    for epoch in 0..config.bootstrap_epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut head_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let tape = Tape::new();
            let bound = model.store.bind(&tape);
            let mut chunk_loss = None;
            let mut chunk_cls = None;
            for &i in chunk {
                let pair = &pairs[i];
                let out = model.forward(
                    &bound,
                    &pair.masked_ids,
                    vocab,
                    pair.label,
                    pair.label,
                )?;
                let weights = loss_weights(pair, config.masked_loss_only);
                let loss = out
                    .token_logits
                    .cross_entropy_rows(&pair.original_ids, &weights);
                chunk_loss = Some(match chunk_loss {
                    Some(acc) => acc + loss,
                    None => loss,
                });
                let class = model.forward_uncond(&bound, &pair.original_ids)?;
                let cls = class.style_logits.cross_entropy_rows(&[pair.label], &[1.0]);
                chunk_cls = Some(match chunk_cls {
                    Some(acc) => acc + cls,
                    None => cls,
                });
            }
            let scale = 1.0 / chunk.len() as f64;
            let total = chunk_loss.expect("non-empty chunk").scale(scale);
            let cls_total = chunk_cls.expect("non-empty chunk").scale(scale);
            let loss_val = total.value()[[0, 0]];
            let cls_val = cls_total.value()[[0, 0]];
            if !(loss_val.is_finite() && cls_val.is_finite()) {
                return Err(SmlmError::Diverged(format!(
                    "bootstrap loss became {loss_val}/{cls_val} at epoch {epoch}"
                )));
            }
            loss_sum += loss_val * chunk.len() as f64;
            head_sum += cls_val * chunk.len() as f64;
            let mut grads = tape.backward(total);
            let mut updates = model.store.collect_grads(&bound, &mut grads, &body);
            drop(grads);
            let mut head_grads = tape.backward(cls_total);
            let mut head_updates = model.store.collect_grads(&bound, &mut head_grads, &head);
            drop(head_grads);
            drop(bound);
            drop(tape);
            clip_global_norm(&mut updates, config.clip_norm);
            clip_global_norm(&mut head_updates, config.clip_norm);
            opt.step(&mut model.store, &updates);
            opt_head.step(&mut model.store, &head_updates);
        }
        let (dev_masked_accuracy, dev_unmasked_accuracy) =
            reconstruction_accuracy(model, masked_dev, dev, vocab)?;
        log.push(BootstrapEpochStats {
            epoch,
            train_loss: loss_sum / pairs.len() as f64,
            train_head_loss: head_sum / pairs.len() as f64,
            dev_masked_accuracy,
            dev_unmasked_accuracy,
        });
    }
    Ok(log)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneEpochStats {
    pub epoch: usize,
    pub reconstruction_loss: f64,
    pub classifier_loss: f64,
    pub adversarial_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub epochs: Vec<FinetuneEpochStats>,
    /// True when a non-finite loss forced a restore of the last finished
    /// epoch's parameters; the restored state is what the model now holds.
    pub restored_after_divergence: bool,
}

/// Stage two: adversarial fine-tuning. Each sentence contributes a
/// reconstruction pass (codes equal), a classification pass on the
/// original text, and a transfer pass (destination flipped) whose soft
/// output is re-encoded for the style head to judge. The encoder descends
/// reconstruction plus the weighted adversarial loss; the head descends
/// classification while ascending the adversarial loss.
pub fn finetune(
    model: &mut Smlm,
    masked_train: &[MaskedExample],
    train: &Corpus,
    vocab: &Vocabulary,
) -> Result<FinetuneReport> {
    fn acc<'t>(slot: &mut Option<Var<'t>>, v: Var<'t>) {
        *slot = Some(match slot.take() {
            Some(a) => a + v,
            None => v,
        });
    }
    let pairs = build_pairs(masked_train, train, vocab)?;
    if pairs.is_empty() {
        return Err(SmlmError::InvalidConfig("empty training set".into()));
    }
    let config = model.config.clone();
    let n_styles = model.n_styles;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed.wrapping_add(2));
    let mut opt_body = Adam::new(config.lr);
    let mut opt_head = Adam::new(config.lr);
    let body = model.body_indices();
    let head = model.head_indices();
    let mut log = Vec::with_capacity(config.finetune_epochs);
    let mut restored_after_divergence = false;

    'epochs: for epoch in 0..config.finetune_epochs {
        let snapshot = model.store.snapshot();
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut bs_sum = 0.0;
        let mut cls_sum = 0.0;
        let mut adv_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let tape = Tape::new();
            let bound = model.store.bind(&tape);
            // Frozen view for the judge pass: a second binding of the same
            // values whose gradients are never collected, except the head,
            // which must keep ascending the adversarial term. Gradient
            // descent on the encoder therefore cannot warp the judge's
            // feature extraction to fake destination style; it has to move
            // the transfer distribution.
            let mut judge_bound = model.store.bind(&tape);
            for &h in &head {
                judge_bound[h] = bound[h];
            }
            let mut bs_total = None;
            let mut cls_total = None;
            let mut adv_total = None;
            for &i in chunk {
                let pair = &pairs[i];
                let dst = (pair.label + 1) % n_styles;

                let recon = model.forward(
                    &bound,
                    &pair.masked_ids,
                    vocab,
                    pair.label,
                    pair.label,
                )?;
                let weights = loss_weights(pair, config.masked_loss_only);
                acc(
                    &mut bs_total,
                    recon
                        .token_logits
                        .cross_entropy_rows(&pair.original_ids, &weights),
                );

                let class = model.forward_uncond(&bound, &pair.original_ids)?;
                acc(
                    &mut cls_total,
                    class.style_logits.cross_entropy_rows(&[pair.label], &[1.0]),
                );

                let transfer =
                    model.forward(&bound, &pair.masked_ids, vocab, pair.label, dst)?;
                let probs = transfer
                    .token_logits
                    .scale(1.0 / config.adv_temperature)
                    .softmax_rows();
                // Sentence rows for the judge: soft embedding mixtures at
                // masked positions, hard embeddings of the source tokens
                // elsewhere, mirroring copy-through inference. The rows are
                // built from the frozen embedding view so the only encoder
                // pathway into the adversarial loss is the transfer
                // distribution itself.
                let rows: Vec<Var<'_>> = (0..pair.masked_ids.len())
                    .map(|p| {
                        if pair.mask_positions.contains(&p) {
                            probs.gather_rows(&[p]).matmul(judge_bound[model.tok_emb])
                        } else {
                            judge_bound[model.tok_emb].gather_rows(&[pair.original_ids[p]])
                        }
                    })
                    .collect();
                let sentence = Var::concat_rows(&rows);
                let judged = model.forward_soft(&judge_bound, sentence);
                acc(
                    &mut adv_total,
                    judged.style_logits.cross_entropy_rows(&[dst], &[1.0]),
                );
            }
            let scale = 1.0 / chunk.len() as f64;
            let bs = bs_total.expect("non-empty chunk").scale(scale);
            let cls = cls_total.expect("non-empty chunk").scale(scale);
            let adv = adv_total.expect("non-empty chunk").scale(scale);
            let body_loss = bs + adv.scale(config.lambda_sta);
            let head_loss = cls + adv.scale(-config.head_adv_ratio);

            let bs_val = bs.value()[[0, 0]];
            let cls_val = cls.value()[[0, 0]];
            let adv_val = adv.value()[[0, 0]];
            if !(bs_val.is_finite() && cls_val.is_finite() && adv_val.is_finite()) {
                model.store.restore(&snapshot);
                restored_after_divergence = true;
                log::warn!(
                    "fine-tune diverged at epoch {epoch}; restored last finished epoch"
                );
                break 'epochs;
            }
            bs_sum += bs_val * chunk.len() as f64;
            cls_sum += cls_val * chunk.len() as f64;
            adv_sum += adv_val * chunk.len() as f64;

            let mut body_grads = tape.backward(body_loss);
            let mut body_updates = model.store.collect_grads(&bound, &mut body_grads, &body);
            drop(body_grads);
            let mut head_grads = tape.backward(head_loss);
            let mut head_updates = model.store.collect_grads(&bound, &mut head_grads, &head);
            drop(head_grads);
            drop(bound);
            drop(tape);
            clip_global_norm(&mut body_updates, config.clip_norm);
            clip_global_norm(&mut head_updates, config.clip_norm);
            opt_body.step(&mut model.store, &body_updates);
            opt_head.step(&mut model.store, &head_updates);
        }
        if !model.store.all_finite() {
            model.store.restore(&snapshot);
            restored_after_divergence = true;
            break;
        }
        log.push(FinetuneEpochStats {
            epoch,
            reconstruction_loss: bs_sum / pairs.len() as f64,
            classifier_loss: cls_sum / pairs.len() as f64,
            adversarial_loss: adv_sum / pairs.len() as f64,
        });
    }
    Ok(FinetuneReport {
        epochs: log,
        restored_after_divergence,
    })
}

/// Transfers a whole masked corpus toward `dst_for`; data-parallel when the
/// `parallel` feature is on, with order preserved.
pub fn transfer_corpus(
    model: &Smlm,
    vocab: &Vocabulary,
    masked: &[MaskedExample],
    dst_for: impl Fn(&MaskedExample) -> usize + Sync,
    redecode: bool,
) -> Result<Vec<Vec<String>>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        masked
            .par_iter()
            .map(|m| model.transfer(vocab, m, dst_for(m), redecode))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        masked
            .iter()
            .map(|m| model.transfer(vocab, m, dst_for(m), redecode))
            .collect()
    }
}

/// Sequential reference used by the benchmark suite.
pub fn transfer_corpus_seq(
    model: &Smlm,
    vocab: &Vocabulary,
    masked: &[MaskedExample],
    dst_for: impl Fn(&MaskedExample) -> usize,
    redecode: bool,
) -> Result<Vec<Vec<String>>> {
    masked
        .iter()
        .map(|m| model.transfer(vocab, m, dst_for(m), redecode))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_toy_corpus, ToyCorpusSpec};
    use crate::corpus::{LabeledExample, MASK_TOKEN};

    fn tiny_vocab() -> (Corpus, Vocabulary) {
        let corpus = Corpus {
            labels: vec!["neg".into(), "pos".into()],
            examples: vec![
                LabeledExample {
                    label: 0,
                    tokens: "the food was bad today".split_whitespace().map(Into::into).collect(),
                },
                LabeledExample {
                    label: 1,
                    tokens: "the food was good today".split_whitespace().map(Into::into).collect(),
                },
            ],
        };
        let vocab = Vocabulary::build(&corpus, 1);
        (corpus, vocab)
    }

    #[test]
    fn forward_shapes_and_code_append_order() {
        let (_, vocab) = tiny_vocab();
        let config = SmlmConfig {
            model_dim: 16,
            n_layers: 1,
            n_heads: 2,
            ff_dim: 32,
            ..SmlmConfig::default()
        };
        let model = Smlm::new(vocab.len(), 2, &config).unwrap();
        let ids = vocab.encode(
            &"the food was bad".split_whitespace().map(String::from).collect::<Vec<_>>(),
        );
        let tape = Tape::new();
        let bound = model.store.bind(&tape);
        let out = model.forward(&bound, &ids, &vocab, 0, 1).unwrap();
        assert_eq!(out.token_logits.dim(), (4, vocab.len()));
        assert_eq!(out.style_logits.dim(), (1, 2));
        assert_eq!(out.token_states.dim(), (4, 16));
    }

    #[test]
    fn forward_rejects_overlong_sentences() {
        let (_, vocab) = tiny_vocab();
        let config = SmlmConfig {
            model_dim: 16,
            n_layers: 1,
            n_heads: 2,
            ff_dim: 16,
            max_len: 6,
            ..SmlmConfig::default()
        };
        let model = Smlm::new(vocab.len(), 2, &config).unwrap();
        let tape = Tape::new();
        let bound = model.store.bind(&tape);
        // 5 tokens + 2 codes > 6.
        let err = model.forward(&bound, &[6, 7, 8, 9, 10], &vocab, 0, 0);
        assert!(err.is_err());
        assert!(model.forward(&bound, &[6, 7, 8, 9], &vocab, 0, 0).is_ok());
    }

    #[test]
    fn transfer_copies_through_unmasked_positions() {
        let (_, vocab) = tiny_vocab();
        let config = SmlmConfig {
            model_dim: 16,
            n_layers: 1,
            n_heads: 2,
            ff_dim: 32,
            ..SmlmConfig::default()
        };
        let model = Smlm::new(vocab.len(), 2, &config).unwrap();
        let masked = MaskedExample {
            label: 0,
            tokens: vec![
                "the".into(),
                MASK_TOKEN.into(),
                "was".into(),
                MASK_TOKEN.into(),
            ],
            mask_positions: vec![1, 3],
        };
        let out = model.transfer(&vocab, &masked, 1, false).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(out[0], "the");
        assert_eq!(out[2], "was");
        // Fills are ordinary words even from an untrained model.
        for pos in [1usize, 3] {
            let id = vocab.id(&out[pos]);
            assert!(!vocab.is_meta(id), "emitted meta token {}", out[pos]);
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let (_, vocab) = tiny_vocab();
        let config = SmlmConfig {
            model_dim: 16,
            n_layers: 2,
            n_heads: 2,
            ff_dim: 32,
            ..SmlmConfig::default()
        };
        let model = Smlm::new(vocab.len(), 2, &config).unwrap();
        model.save(dir.path()).unwrap();
        let loaded = Smlm::load(dir.path()).unwrap();
        assert_eq!(loaded.param_count(), model.param_count());
        let masked = MaskedExample {
            label: 1,
            tokens: vec!["the".into(), MASK_TOKEN.into(), "today".into()],
            mask_positions: vec![1],
        };
        assert_eq!(
            model.transfer(&vocab, &masked, 0, false).unwrap(),
            loaded.transfer(&vocab, &masked, 0, false).unwrap()
        );
    }

    #[test]
    fn bootstrap_learns_reconstruction_on_a_small_corpus() {
        let spec = ToyCorpusSpec {
            train_per_label: 24,
            dev_per_label: 8,
            test_per_label: 8,
            ..ToyCorpusSpec::default()
        };
        let toy = generate_toy_corpus(&spec).unwrap();
        let vocab = Vocabulary::build(&toy.train.corpus, 1);
        // Mask the planted style tokens directly.
        let mask_with_gold = |split: &crate::corpus::ToySplit| -> Vec<MaskedExample> {
            split
                .corpus
                .examples
                .iter()
                .zip(&split.planted)
                .map(|(ex, planted)| {
                    let mut tokens = ex.tokens.clone();
                    for &p in planted {
                        tokens[p] = MASK_TOKEN.to_string();
                    }
                    MaskedExample {
                        label: ex.label,
                        tokens,
                        mask_positions: planted.clone(),
                    }
                })
                .collect()
        };
        let masked_train = mask_with_gold(&toy.train);
        let masked_dev = mask_with_gold(&toy.dev);
        let config = SmlmConfig {
            model_dim: 32,
            n_layers: 1,
            n_heads: 4,
            ff_dim: 64,
            bootstrap_epochs: 6,
            lr: 3e-3,
            seed: 5,
            ..SmlmConfig::default()
        };
        let mut model = Smlm::new(vocab.len(), 2, &config).unwrap();
        let log = bootstrap_train(
            &mut model,
            &masked_train,
            &toy.train.corpus,
            &masked_dev,
            &toy.dev.corpus,
            &vocab,
        )
        .unwrap();
        assert_eq!(log.len(), 6);
        let first = &log[0];
        let last = log.last().unwrap();
        assert!(last.train_loss < first.train_loss);
        assert!(
            last.dev_unmasked_accuracy > 0.9,
            "identity copy not learned: {}",
            last.dev_unmasked_accuracy
        );
        assert!(
            last.dev_masked_accuracy > first.dev_masked_accuracy.min(0.99),
            "mask filling did not improve: {} -> {}",
            first.dev_masked_accuracy,
            last.dev_masked_accuracy
        );
    }
}
