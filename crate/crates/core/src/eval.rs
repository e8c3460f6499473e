//! Transfer evaluation: corpus BLEU, ROUGE-L, classifier-judged transfer
//! strength, mask quality, and the margin sweep.
//!
//! BLEU is corpus-level with modified n-gram precision up to 4-grams,
//! multi-reference clipping, a brevity penalty, and no smoothing: if any
//! precision is zero the score is zero. ROUGE-L is the mean per-sentence
//! LCS F-measure with beta = 1.2 on a 0..1 scale.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attribution::{
    attribute_corpus, classifier_accuracy, predict_all, AttributionMethod, ClassifierConfig,
    StyleClassifier, DEFAULT_IG_STEPS,
};
use crate::corpus::{Corpus, MaskedExample, Vocabulary, MASK_ID, UNK_ID};
use crate::error::{Result, SmlmError};
use crate::masking::{mask_corpus, mask_rate};
use crate::nn::lstm::LstmClassifier;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Clipped n-gram match and total counts for one candidate against its
/// references, orders 1..=4.
fn ngram_stats(candidate: &[String], references: &[&[String]]) -> ([usize; 4], [usize; 4]) {
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    for n in 1..=4usize {
        if candidate.len() < n {
            break;
        }
        let mut cand_counts: HashMap<&[String], usize> = HashMap::new();
        for gram in candidate.windows(n) {
            *cand_counts.entry(gram).or_insert(0) += 1;
        }
        total[n - 1] = candidate.len() + 1 - n;
        for (gram, count) in cand_counts {
            let clip = references
                .iter()
                .map(|r| r.windows(n).filter(|g| *g == gram).count())
                .max()
                .unwrap_or(0);
            matched[n - 1] += count.min(clip);
        }
    }
    (matched, total)
}

/// Reference length closest to the candidate's; ties prefer the shorter.
fn effective_ref_len(cand_len: usize, references: &[&[String]]) -> usize {
    references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&rl| {
            let diff = rl.abs_diff(cand_len);
            (diff, rl)
        })
        .unwrap_or(0)
}

/// Corpus BLEU in 0..100 against one or more references per candidate.
pub fn corpus_bleu(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> f64 {
    assert_eq!(
        candidates.len(),
        references.len(),
        "candidate/reference count mismatch"
    );
    if candidates.is_empty() {
        return 0.0;
    }
    let pair_stats = |(cand, refs): (&Vec<String>, &Vec<Vec<String>>)| {
        let ref_views: Vec<&[String]> = refs.iter().map(|r| r.as_slice()).collect();
        let (matched, total) = ngram_stats(cand, &ref_views);
        (
            matched,
            total,
            cand.len(),
            effective_ref_len(cand.len(), &ref_views),
        )
    };
    let fold = |mut acc: ([usize; 4], [usize; 4], usize, usize),
                item: ([usize; 4], [usize; 4], usize, usize)| {
        for i in 0..4 {
            acc.0[i] += item.0[i];
            acc.1[i] += item.1[i];
        }
        acc.2 += item.2;
        acc.3 += item.3;
        acc
    };
    let zero = ([0usize; 4], [0usize; 4], 0usize, 0usize);
    #[cfg(feature = "parallel")]
    let (matched, total, cand_len, ref_len) = candidates
        .par_iter()
        .zip(references.par_iter())
        .map(pair_stats)
        .reduce(|| zero, fold);
    #[cfg(not(feature = "parallel"))]
    let (matched, total, cand_len, ref_len) = candidates
        .iter()
        .zip(references.iter())
        .map(pair_stats)
        .fold(zero, fold);

    let mut log_precision_sum = 0.0;
    for n in 0..4 {
        if total[n] == 0 || matched[n] == 0 {
            return 0.0;
        }
        log_precision_sum += (matched[n] as f64 / total[n] as f64).ln();
    }
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    bp * (log_precision_sum / 4.0).exp() * 100.0
}

/// Single-reference convenience wrapper.
pub fn corpus_bleu_single(candidates: &[Vec<String>], references: &[Vec<String>]) -> f64 {
    let wrapped: Vec<Vec<Vec<String>>> = references.iter().map(|r| vec![r.clone()]).collect();
    corpus_bleu(candidates, &wrapped)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

const ROUGE_BETA: f64 = 1.2;

/// Per-sentence LCS F-measure.
pub fn rouge_l_sentence(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let recall = lcs / reference.len() as f64;
    let precision = lcs / candidate.len() as f64;
    let beta2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + beta2) * recall * precision / (recall + beta2 * precision)
}

/// Mean per-sentence ROUGE-L over a corpus, in 0..1.
pub fn rouge_l_corpus(candidates: &[Vec<String>], references: &[Vec<String>]) -> f64 {
    assert_eq!(candidates.len(), references.len());
    if candidates.is_empty() {
        return 0.0;
    }
    // Collect in corpus order and add sequentially: a parallel fold would
    // sum in a scheduling-dependent order and float addition is not
    // associative, which would break run-to-run reproducibility.
    #[cfg(feature = "parallel")]
    let scores: Vec<f64> = candidates
        .par_iter()
        .zip(references.par_iter())
        .map(|(c, r)| rouge_l_sentence(c, r))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let scores: Vec<f64> = candidates
        .iter()
        .zip(references.iter())
        .map(|(c, r)| rouge_l_sentence(c, r))
        .collect();
    scores.iter().sum::<f64>() / candidates.len() as f64
}

/// Replaces mask ids with unk so classifier inputs never contain tokens the
/// classifier has no training signal for.
pub fn sanitize_for_classifier(ids: &[usize]) -> Vec<usize> {
    ids.iter()
        .map(|&id| if id == MASK_ID { UNK_ID } else { id })
        .collect()
}

/// Percentage of outputs the evaluation classifier assigns to their target
/// style.
pub fn tst_percent(eval: &LstmClassifier, outputs: &[Vec<usize>], targets: &[usize]) -> f64 {
    assert_eq!(outputs.len(), targets.len());
    if outputs.is_empty() {
        return 0.0;
    }
    let sanitized: Vec<Vec<usize>> = outputs.iter().map(|o| sanitize_for_classifier(o)).collect();
    let preds = predict_all(eval, &sanitized);
    let hits = preds.iter().zip(targets).filter(|(p, t)| p == t).count();
    100.0 * hits as f64 / outputs.len() as f64
}

/// Default configuration for the evaluation classifier: bidirectional, no
/// conicity penalty, light token dropout so unk-heavy masked inputs stay
/// in-distribution.
pub fn eval_classifier_config(seed: u64) -> ClassifierConfig {
    ClassifierConfig {
        embed_dim: 64,
        hidden_dim: 64,
        epochs: 8,
        lr: 2e-3,
        batch_size: 32,
        lambda_con: 0.0,
        token_dropout: 0.1,
        bidirectional: true,
        seed,
    }
}

/// How much label signal masking removed, and at what content cost.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskQualityReport {
    pub mask_rate: f64,
    /// Classifier accuracy on the masked text against the true labels.
    pub masked_accuracy: f64,
    /// Classifier accuracy on the original text; the floor the masked
    /// number should be compared against.
    pub unmasked_accuracy: f64,
    /// `masked_accuracy / unmasked_accuracy`.
    pub normalized_accuracy: f64,
    /// BLEU of the masked text against the original text.
    pub s_bleu_masked: f64,
}

pub fn mask_quality(
    eval: &LstmClassifier,
    vocab: &Vocabulary,
    corpus: &Corpus,
    masked: &[MaskedExample],
) -> Result<MaskQualityReport> {
    if corpus.examples.len() != masked.len() {
        return Err(SmlmError::ShapeMismatch(format!(
            "{} originals vs {} masked examples",
            corpus.examples.len(),
            masked.len()
        )));
    }
    let masked_data: Vec<(Vec<usize>, usize)> = masked
        .iter()
        .map(|m| (sanitize_for_classifier(&vocab.encode(&m.tokens)), m.label))
        .collect();
    let original_data: Vec<(Vec<usize>, usize)> = corpus
        .examples
        .iter()
        .map(|ex| (vocab.encode(&ex.tokens), ex.label))
        .collect();
    let masked_accuracy = classifier_accuracy(eval, &masked_data);
    let unmasked_accuracy = classifier_accuracy(eval, &original_data);
    let originals: Vec<Vec<String>> = corpus.examples.iter().map(|e| e.tokens.clone()).collect();
    let masked_tokens: Vec<Vec<String>> = masked.iter().map(|m| m.tokens.clone()).collect();
    Ok(MaskQualityReport {
        mask_rate: mask_rate(masked),
        masked_accuracy,
        unmasked_accuracy,
        normalized_accuracy: if unmasked_accuracy > 0.0 {
            masked_accuracy / unmasked_accuracy
        } else {
            0.0
        },
        s_bleu_masked: corpus_bleu_single(&masked_tokens, &originals),
    })
}

/// Aggregate precision/recall of predicted mask positions against gold
/// positions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn masking_precision_recall(
    predicted: &[Vec<usize>],
    gold: &[Vec<usize>],
) -> PrecisionRecall {
    assert_eq!(predicted.len(), gold.len());
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (p, g) in predicted.iter().zip(gold) {
        for pos in p {
            if g.contains(pos) {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        for pos in g {
            if !p.contains(pos) {
                fn_ += 1;
            }
        }
    }
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    PrecisionRecall {
        precision,
        recall,
        f1,
    }
}

/// One row of the surplus-margin sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub mask_rate: f64,
    pub s_bleu_masked: f64,
    pub masked_accuracy: f64,
    pub normalized_accuracy: f64,
}

/// Masks the corpus at each margin and scores the result. Attributions are
/// computed once by the caller; masking itself is cheap.
pub fn lambda_sweep(
    eval: &LstmClassifier,
    vocab: &Vocabulary,
    corpus: &Corpus,
    attributions: &[Vec<f64>],
    lambdas: &[f64],
) -> Result<Vec<SweepRow>> {
    lambdas
        .iter()
        .map(|&lambda| {
            let masked = mask_corpus(corpus, attributions, lambda)?;
            let q = mask_quality(eval, vocab, corpus, &masked)?;
            Ok(SweepRow {
                lambda,
                mask_rate: q.mask_rate,
                s_bleu_masked: q.s_bleu_masked,
                masked_accuracy: q.masked_accuracy,
                normalized_accuracy: q.normalized_accuracy,
            })
        })
        .collect()
}

/// One row of the masking-method comparison: a method name (or "none" for
/// the unmasked baseline) with its mask quality.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub quality: MaskQualityReport,
}

/// Scores every attribution method's masking on the same corpus with the
/// same judge, plus an unmasked baseline row. Attention methods read the
/// classifier they are valid for — encoder attention needs the
/// conicity-regularized one, everything else runs on the plain one — while
/// the judge measuring accuracy and BLEU is fixed across rows.
pub fn compare_attribution_methods(
    judge: &LstmClassifier,
    regularized: &StyleClassifier,
    plain: &StyleClassifier,
    vocab: &Vocabulary,
    corpus: &Corpus,
    lambda: f64,
) -> Result<Vec<MethodRow>> {
    let order = [
        AttributionMethod::VanillaAttention,
        AttributionMethod::EncoderAttention,
        AttributionMethod::VanillaGradients,
        AttributionMethod::GradientsTimesInput,
        AttributionMethod::IntegratedGradients,
    ];
    let mut rows = Vec::with_capacity(order.len() + 1);
    for method in order {
        let classifier = match method {
            AttributionMethod::EncoderAttention => regularized,
            _ => plain,
        };
        let attrs = attribute_corpus(classifier, method, corpus, vocab, DEFAULT_IG_STEPS)?;
        let scores: Vec<Vec<f64>> = attrs.into_iter().map(|a| a.scores).collect();
        let masked = mask_corpus(corpus, &scores, lambda)?;
        rows.push(MethodRow {
            method: method.short_name().to_string(),
            quality: mask_quality(judge, vocab, corpus, &masked)?,
        });
    }
    let unmasked: Vec<MaskedExample> = corpus
        .examples
        .iter()
        .map(|ex| MaskedExample {
            label: ex.label,
            tokens: ex.tokens.clone(),
            mask_positions: Vec::new(),
        })
        .collect();
    rows.push(MethodRow {
        method: "none".to_string(),
        quality: mask_quality(judge, vocab, corpus, &unmasked)?,
    });
    Ok(rows)
}

/// Plain-text table of a method comparison.
pub fn compare_table(rows: &[MethodRow]) -> String {
    let mut out = String::from(
        "method  mask_rate  masked_acc  unmasked_acc  norm_acc  s_bleu_masked\n",
    );
    for r in rows {
        writeln!(
            out,
            "{:<6}  {:>9.4}  {:>10.4}  {:>12.4}  {:>8.4}  {:>13.2}",
            r.method,
            r.quality.mask_rate,
            r.quality.masked_accuracy,
            r.quality.unmasked_accuracy,
            r.quality.normalized_accuracy,
            r.quality.s_bleu_masked
        )
        .expect("string write");
    }
    out
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("lambda,mask_rate,s_bleu_masked,masked_accuracy,normalized_accuracy\n");
    for r in rows {
        writeln!(
            out,
            "{},{:.6},{:.4},{:.6},{:.6}",
            r.lambda, r.mask_rate, r.s_bleu_masked, r.masked_accuracy, r.normalized_accuracy
        )
        .expect("string write");
    }
    out
}

/// Full transfer scorecard.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub n_examples: usize,
    /// Percentage of outputs classified as their target style.
    pub tst_percent: f64,
    /// BLEU of outputs against their source sentences.
    pub s_bleu: f64,
    /// BLEU of outputs against gold references, when references exist.
    pub r_bleu: Option<f64>,
    /// ROUGE-L of outputs against source sentences, 0..1.
    pub rouge_l: f64,
    /// Arithmetic mean of transfer strength and source BLEU.
    pub mean2: f64,
    pub mask_rate: f64,
}

impl EvalReport {
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let mut row = |k: &str, v: String| writeln!(out, "{k:<12} {v:>10}").expect("write");
        row("examples", format!("{}", self.n_examples));
        row("TST%", format!("{:.2}", self.tst_percent));
        row("s-BLEU", format!("{:.2}", self.s_bleu));
        match self.r_bleu {
            Some(r) => row("r-BLEU", format!("{r:.2}")),
            None => row("r-BLEU", "-".into()),
        }
        row("ROUGE-L", format!("{:.4}", self.rouge_l));
        row("Mean-2", format!("{:.2}", self.mean2));
        row("mask rate", format!("{:.4}", self.mask_rate));
        out
    }
}

/// Scores transferred sentences against their sources (and references if
/// available). `targets` holds the destination style per output.
pub fn evaluate_transfer(
    eval: &LstmClassifier,
    vocab: &Vocabulary,
    sources: &Corpus,
    outputs: &[Vec<String>],
    targets: &[usize],
    references: Option<&[Vec<String>]>,
    mask_rate: f64,
) -> Result<EvalReport> {
    if outputs.len() != sources.examples.len() || outputs.len() != targets.len() {
        return Err(SmlmError::ShapeMismatch(format!(
            "{} outputs vs {} sources vs {} targets",
            outputs.len(),
            sources.examples.len(),
            targets.len()
        )));
    }
    let output_ids: Vec<Vec<usize>> = outputs.iter().map(|o| vocab.encode(o)).collect();
    let tst = tst_percent(eval, &output_ids, targets);
    let source_tokens: Vec<Vec<String>> =
        sources.examples.iter().map(|e| e.tokens.clone()).collect();
    let s_bleu = corpus_bleu_single(outputs, &source_tokens);
    let r_bleu = references.map(|r| {
        assert_eq!(r.len(), outputs.len(), "reference count mismatch");
        corpus_bleu_single(outputs, r)
    });
    let rouge_l = rouge_l_corpus(outputs, &source_tokens);
    Ok(EvalReport {
        n_examples: outputs.len(),
        tst_percent: tst,
        s_bleu,
        r_bleu,
        rouge_l,
        mean2: (tst + s_bleu) / 2.0,
        mask_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn bleu_matches_a_hand_computed_case() {
        // 1-gram 6/7, 2-gram 4/6, 3-gram 2/5, 4-gram 1/4, BP = 1.
        let cand = vec![toks("the cat sat on the mat .")];
        let refs = vec![toks("the cat is on the mat .")];
        let got = corpus_bleu_single(&cand, &refs);
        let want = (6.0 / 7.0 * (4.0 / 6.0) * (2.0 / 5.0) * 0.25_f64).powf(0.25) * 100.0;
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        assert!((got - 48.8923).abs() < 1e-3);
    }

    #[test]
    fn bleu_of_identity_is_one_hundred() {
        let cand = vec![toks("a b c d e"), toks("f g h i")];
        assert_eq!(corpus_bleu_single(&cand, &cand), 100.0);
    }

    #[test]
    fn bleu_is_zero_when_any_order_has_no_match() {
        // No shared 4-grams anywhere: no smoothing means exact zero.
        let cand = vec![toks("a b c d")];
        let refs = vec![toks("a b x d")];
        assert_eq!(corpus_bleu_single(&cand, &refs), 0.0);
    }

    #[test]
    fn multi_reference_clipping_takes_the_max_per_reference() {
        // Candidate "a a a": unigram clip is max(count in each ref) = 2.
        let cand = vec![toks("a a a")];
        let refs = vec![vec![toks("a a"), toks("a b")]];
        let ref_views: Vec<&[String]> = refs[0].iter().map(|r| r.as_slice()).collect();
        let (matched, total) = ngram_stats(&cand[0], &ref_views);
        assert_eq!((matched[0], total[0]), (2, 3));
        assert_eq!((matched[1], total[1]), (1, 2));
        // 3-grams unmatched, so the full score collapses to zero.
        assert_eq!(corpus_bleu(&cand, &refs), 0.0);
    }

    #[test]
    fn brevity_penalty_punishes_short_candidates() {
        let long_ref = vec![toks("a b c d e f g h")];
        let short_cand = vec![toks("a b c d")];
        let full_cand = vec![toks("a b c d e f g h")];
        let short = corpus_bleu_single(&short_cand, &long_ref);
        let full = corpus_bleu_single(&full_cand, &long_ref);
        let expected_bp = (1.0 - 8.0 / 4.0_f64).exp();
        assert!((short - 100.0 * expected_bp).abs() < 1e-9);
        assert_eq!(full, 100.0);
    }

    #[test]
    fn rouge_l_matches_a_hand_computed_case() {
        // LCS("the cat sat", "the cat on mat") = 2.
        let c = toks("the cat sat");
        let r = toks("the cat on mat");
        let recall: f64 = 2.0 / 4.0;
        let precision: f64 = 2.0 / 3.0;
        let beta2 = 1.44;
        let want = (1.0 + beta2) * recall * precision / (recall + beta2 * precision);
        let got = rouge_l_sentence(&c, &r);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert_eq!(rouge_l_sentence(&c, &c), 1.0);
    }

    #[test]
    fn rouge_l_handles_disjoint_and_empty_inputs() {
        assert_eq!(rouge_l_sentence(&toks("a b"), &toks("c d")), 0.0);
        assert_eq!(rouge_l_sentence(&[], &toks("a")), 0.0);
        let corpus_score = rouge_l_corpus(
            &[toks("a b"), toks("x y")],
            &[toks("a b"), toks("x y")],
        );
        assert_eq!(corpus_score, 1.0);
    }

    #[test]
    fn masking_precision_recall_counts_aggregate_positions() {
        let predicted = vec![vec![1, 3], vec![0]];
        let gold = vec![vec![1, 2], vec![0, 4]];
        let pr = masking_precision_recall(&predicted, &gold);
        // tp = {1, 0} = 2, fp = {3} = 1, fn = {2, 4} = 2.
        assert!((pr.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((pr.recall - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sanitizer_replaces_only_mask_ids() {
        let ids = vec![5, MASK_ID, 7, MASK_ID];
        assert_eq!(sanitize_for_classifier(&ids), vec![5, UNK_ID, 7, UNK_ID]);
    }

    #[test]
    fn report_table_labels_the_combined_score_mean2() {
        let report = EvalReport {
            n_examples: 10,
            tst_percent: 90.0,
            s_bleu: 70.0,
            r_bleu: None,
            rouge_l: 0.8,
            mean2: 80.0,
            mask_rate: 0.2,
        };
        let table = report.render_table();
        assert!(table.contains("Mean-2"));
        assert!(table.contains("80.00"));
        let json = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}
