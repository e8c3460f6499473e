//! Attribution-surplus masking.
//!
//! A token is masked when its attribution meets or exceeds a baseline that
//! sits a relative margin above the mean attribution. For a normalized
//! attribution vector of length `n` the mean is `1/n`, so the baseline is
//! `(1 + lambda) / n`. The rule is a single linear scan: no sorting and no
//! ranking, so masking a sentence costs O(n).

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, LabeledExample, MaskedExample, MASK_TOKEN};
use crate::error::{Result, SmlmError};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Settings for the surplus masking rule.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskPolicyConfig {
    /// Relative margin over the mean attribution; larger masks less.
    pub lambda_epsilon: f64,
}

impl Default for MaskPolicyConfig {
    fn default() -> Self {
        MaskPolicyConfig {
            lambda_epsilon: 0.15,
        }
    }
}

/// Mean attribution scaled by the surplus margin.
pub fn compute_baseline(scores: &[f64], lambda: f64) -> f64 {
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    (1.0 + lambda) * mean
}

/// Boolean mask, true where `scores[i] >= baseline`. Ties mask: a token
/// exactly at the baseline counts as style-bearing. A one-token sentence
/// with `lambda > 0` therefore passes through unmasked, while `lambda = 0`
/// on a uniform vector masks everything.
pub fn attention_surplus_mask(scores: &[f64], lambda: f64) -> Vec<bool> {
    let baseline = compute_baseline(scores, lambda);
    scores.iter().map(|&s| s >= baseline).collect()
}

/// Replaces the flagged tokens with `<mask>` and records their positions.
pub fn apply_mask(example: &LabeledExample, mask: &[bool]) -> Result<MaskedExample> {
    if mask.len() != example.tokens.len() {
        return Err(SmlmError::ShapeMismatch(format!(
            "mask length {} vs {} tokens",
            mask.len(),
            example.tokens.len()
        )));
    }
    let mut tokens = example.tokens.clone();
    let mut mask_positions = Vec::new();
    for (i, &m) in mask.iter().enumerate() {
        if m {
            tokens[i] = MASK_TOKEN.to_string();
            mask_positions.push(i);
        }
    }
    Ok(MaskedExample {
        label: example.label,
        tokens,
        mask_positions,
    })
}

/// Masks one sentence from its attribution scores.
pub fn mask_example(
    example: &LabeledExample,
    scores: &[f64],
    lambda: f64,
) -> Result<MaskedExample> {
    if scores.len() != example.tokens.len() {
        return Err(SmlmError::ShapeMismatch(format!(
            "{} attribution scores vs {} tokens",
            scores.len(),
            example.tokens.len()
        )));
    }
    apply_mask(example, &attention_surplus_mask(scores, lambda))
}

/// Sequential corpus masking; `attributions` is index-aligned with the
/// corpus examples.
pub fn mask_corpus_seq(
    corpus: &Corpus,
    attributions: &[Vec<f64>],
    lambda: f64,
) -> Result<Vec<MaskedExample>> {
    if attributions.len() != corpus.examples.len() {
        return Err(SmlmError::ShapeMismatch(format!(
            "{} attribution vectors vs {} examples",
            attributions.len(),
            corpus.examples.len()
        )));
    }
    corpus
        .examples
        .iter()
        .zip(attributions)
        .map(|(ex, scores)| mask_example(ex, scores, lambda))
        .collect()
}

/// Corpus masking; data-parallel when the `parallel` feature is enabled.
/// Output order matches input order either way.
#[cfg(feature = "parallel")]
pub fn mask_corpus(
    corpus: &Corpus,
    attributions: &[Vec<f64>],
    lambda: f64,
) -> Result<Vec<MaskedExample>> {
    if attributions.len() != corpus.examples.len() {
        return Err(SmlmError::ShapeMismatch(format!(
            "{} attribution vectors vs {} examples",
            attributions.len(),
            corpus.examples.len()
        )));
    }
    corpus
        .examples
        .par_iter()
        .zip(attributions.par_iter())
        .map(|(ex, scores)| mask_example(ex, scores, lambda))
        .collect()
}

#[cfg(not(feature = "parallel"))]
pub fn mask_corpus(
    corpus: &Corpus,
    attributions: &[Vec<f64>],
    lambda: f64,
) -> Result<Vec<MaskedExample>> {
    mask_corpus_seq(corpus, attributions, lambda)
}

/// Fraction of tokens masked across a masked corpus.
pub fn mask_rate(masked: &[MaskedExample]) -> f64 {
    let total: usize = masked.iter().map(|m| m.tokens.len()).sum();
    let hit: usize = masked.iter().map(|m| m.mask_positions.len()).sum();
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn example(tokens: &[&str]) -> LabeledExample {
        LabeledExample {
            label: 0,
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn masks_scores_at_or_above_the_surplus_baseline() {
        // n = 4, lambda = 0.15: baseline = 1.15 / 4 = 0.2875.
        let scores = [0.5, 0.2875, 0.2, 0.0125];
        let mask = attention_surplus_mask(&scores, 0.15);
        assert_eq!(mask, vec![true, true, false, false]);
    }

    #[test]
    fn uniform_scores_with_zero_lambda_mask_everything() {
        let scores = [0.25; 4];
        assert!(attention_surplus_mask(&scores, 0.0).iter().all(|&m| m));
        // Any positive margin puts uniform scores strictly below baseline.
        assert!(attention_surplus_mask(&scores, 1e-9).iter().all(|&m| !m));
    }

    #[test]
    fn single_token_passes_through_unmasked_with_positive_lambda() {
        let ex = example(&["hello"]);
        let masked = mask_example(&ex, &[1.0], 0.15).unwrap();
        assert!(masked.mask_positions.is_empty());
        assert_eq!(masked.tokens, ex.tokens);
        // With lambda = 0 the single token is exactly at baseline and masks.
        let masked = mask_example(&ex, &[1.0], 0.0).unwrap();
        assert_eq!(masked.mask_positions, vec![0]);
    }

    #[test]
    fn apply_mask_rejects_length_mismatch() {
        let ex = example(&["a", "b"]);
        assert!(apply_mask(&ex, &[true]).is_err());
        assert!(mask_example(&ex, &[0.5], 0.15).is_err());
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let corpus = Corpus {
            labels: vec!["x".into()],
            examples: (0..64)
                .map(|i| example(&["a", "b", "c", "d", "e"][..(i % 4) + 2]))
                .collect(),
        };
        let attributions: Vec<Vec<f64>> = corpus
            .examples
            .iter()
            .enumerate()
            .map(|(i, ex)| {
                let n = ex.tokens.len();
                (0..n)
                    .map(|j| ((i * 31 + j * 17) % 23) as f64 / 23.0)
                    .map(|v| v + 0.01)
                    .collect()
            })
            .collect();
        // Normalize each vector to sum one.
        let attributions: Vec<Vec<f64>> = attributions
            .into_iter()
            .map(|v| {
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect()
            })
            .collect();
        let par = mask_corpus(&corpus, &attributions, 0.15).unwrap();
        let seq = mask_corpus_seq(&corpus, &attributions, 0.15).unwrap();
        assert_eq!(par, seq);
    }

    proptest! {
        /// Raising lambda never adds masked positions.
        #[test]
        fn mask_sets_shrink_as_lambda_grows(
            raw in proptest::collection::vec(0.0f64..1.0, 1..40),
            pair in (0.0f64..2.0, 0.0f64..2.0),
        ) {
            let sum: f64 = raw.iter().sum();
            prop_assume!(sum > 0.0);
            let scores: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let (a, b) = pair;
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let mask_lo = attention_surplus_mask(&scores, lo);
            let mask_hi = attention_surplus_mask(&scores, hi);
            for (l, h) in mask_lo.iter().zip(&mask_hi) {
                prop_assert!(*l || !*h, "position masked at {hi} but not {lo}");
            }
        }

        /// Masked output preserves length, keeps unmasked tokens verbatim,
        /// and lists exactly the mask positions.
        #[test]
        fn masking_preserves_everything_outside_the_mask(
            tokens in proptest::collection::vec("[a-z]{1,5}", 1..30),
            lambda in 0.0f64..1.0,
            seed in 0u64..1000,
        ) {
            let n = tokens.len();
            let scores: Vec<f64> = (0..n)
                .map(|i| ((seed + i as u64 * 7919) % 101) as f64 + 1.0)
                .collect();
            let total: f64 = scores.iter().sum();
            let scores: Vec<f64> = scores.into_iter().map(|v| v / total).collect();
            let ex = LabeledExample { label: 0, tokens: tokens.clone() };
            let masked = mask_example(&ex, &scores, lambda).unwrap();
            prop_assert_eq!(masked.tokens.len(), n);
            for i in 0..n {
                if masked.mask_positions.contains(&i) {
                    prop_assert_eq!(masked.tokens[i].as_str(), MASK_TOKEN);
                } else {
                    prop_assert_eq!(&masked.tokens[i], &tokens[i]);
                }
            }
            prop_assert!(masked.mask_positions.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
