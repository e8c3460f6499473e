//! Corpora, vocabularies, and the synthetic sentiment corpus generator.
//!
//! On-disk formats are line-oriented TSV. Plain corpora use
//! `label<TAB>token token ...`; masked corpora add a third field with
//! comma-separated masked positions. The vocabulary file is one token per
//! line in id order, with the reserved prefix `<pad> <unk> <mask>` followed
//! by a source/destination code pair per style.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmlmError};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const MASK_ID: usize = 2;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const MASK_TOKEN: &str = "<mask>";

/// One sentence with its style label id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    pub label: usize,
    pub tokens: Vec<String>,
}

/// A sentence after masking; `tokens` contains `<mask>` at each listed
/// position, and positions are strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedExample {
    pub label: usize,
    pub tokens: Vec<String>,
    pub mask_positions: Vec<usize>,
}

/// A set of labeled sentences plus the label-name table giving ids meaning.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub labels: Vec<String>,
    pub examples: Vec<LabeledExample>,
}

impl Corpus {
    pub fn n_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn label_id(&self, name: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == name)
            .ok_or_else(|| SmlmError::UnknownLabel(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

fn label_lookup(labels: &[String]) -> HashMap<&str, usize> {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect()
}

/// Reads a `label<TAB>tokens` file. When `labels` is `None` the label set
/// is the lexicographically sorted list of distinct names in the file.
pub fn load_corpus(path: &Path, labels: Option<&[String]>) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| SmlmError::io(path, e))?;
    let mut raw = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (label, rest) = line.split_once('\t').ok_or_else(|| {
            SmlmError::MalformedRecord {
                path: path.into(),
                line: lineno + 1,
                reason: "expected label<TAB>tokens".into(),
            }
        })?;
        let tokens: Vec<String> = rest.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            return Err(SmlmError::MalformedRecord {
                path: path.into(),
                line: lineno + 1,
                reason: "empty sentence".into(),
            });
        }
        raw.push((label.to_string(), tokens, lineno + 1));
    }
    let label_vec: Vec<String> = match labels {
        Some(l) => l.to_vec(),
        None => {
            let mut distinct: Vec<String> = raw.iter().map(|(l, _, _)| l.clone()).collect();
            distinct.sort();
            distinct.dedup();
            distinct
        }
    };
    let lookup = label_lookup(&label_vec);
    let mut examples = Vec::with_capacity(raw.len());
    for (label, tokens, lineno) in raw {
        let id = *lookup
            .get(label.as_str())
            .ok_or_else(|| SmlmError::MalformedRecord {
                path: path.into(),
                line: lineno,
                reason: format!("unknown label `{label}`"),
            })?;
        examples.push(LabeledExample { label: id, tokens });
    }
    Ok(Corpus {
        labels: label_vec,
        examples,
    })
}

pub fn save_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut out = String::new();
    for ex in &corpus.examples {
        writeln!(
            out,
            "{}\t{}",
            corpus.labels[ex.label],
            ex.tokens.join(" ")
        )
        .expect("string write");
    }
    fs::write(path, out).map_err(|e| SmlmError::io(path, e))
}

/// Reads a masked TSV (`label<TAB>tokens<TAB>pos,pos,...`).
pub fn load_masked(path: &Path, labels: &[String]) -> Result<Vec<MaskedExample>> {
    let text = fs::read_to_string(path).map_err(|e| SmlmError::io(path, e))?;
    let lookup = label_lookup(labels);
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let malformed = |reason: String| SmlmError::MalformedRecord {
            path: path.into(),
            line: lineno + 1,
            reason,
        };
        let mut fields = line.split('\t');
        let label = fields.next().unwrap_or_default();
        let toks = fields
            .next()
            .ok_or_else(|| malformed("expected label<TAB>tokens<TAB>positions".into()))?;
        let pos_field = fields
            .next()
            .ok_or_else(|| malformed("missing positions field".into()))?;
        if fields.next().is_some() {
            return Err(malformed("too many fields".into()));
        }
        let label = *lookup
            .get(label)
            .ok_or_else(|| malformed(format!("unknown label `{label}`")))?;
        let tokens: Vec<String> = toks.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            return Err(malformed("empty sentence".into()));
        }
        let mut mask_positions = Vec::new();
        if !pos_field.is_empty() {
            for p in pos_field.split(',') {
                let p: usize = p
                    .parse()
                    .map_err(|_| malformed(format!("bad position `{p}`")))?;
                if p >= tokens.len() {
                    return Err(malformed(format!(
                        "position {p} out of range for {} tokens",
                        tokens.len()
                    )));
                }
                mask_positions.push(p);
            }
        }
        if mask_positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(malformed("positions not strictly increasing".into()));
        }
        for &p in &mask_positions {
            if tokens[p] != MASK_TOKEN {
                return Err(malformed(format!(
                    "position {p} listed as masked but token is `{}`",
                    tokens[p]
                )));
            }
        }
        out.push(MaskedExample {
            label,
            tokens,
            mask_positions,
        });
    }
    Ok(out)
}

pub fn save_masked(path: &Path, examples: &[MaskedExample], labels: &[String]) -> Result<()> {
    let mut out = String::new();
    for ex in examples {
        let positions: Vec<String> = ex.mask_positions.iter().map(usize::to_string).collect();
        writeln!(
            out,
            "{}\t{}\t{}",
            labels[ex.label],
            ex.tokens.join(" "),
            positions.join(",")
        )
        .expect("string write");
    }
    fs::write(path, out).map_err(|e| SmlmError::io(path, e))
}

/// Token table with reserved ids. Ids `0..3` are pad/unk/mask; the next
/// `2 * n_styles` ids are the per-style source and destination codes; real
/// tokens follow, ordered by descending training frequency then
/// lexicographically.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    pub n_styles: usize,
}

impl Vocabulary {
    /// Builds from a training corpus, keeping tokens seen at least
    /// `min_freq` times.
    pub fn build(corpus: &Corpus, min_freq: usize) -> Vocabulary {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for ex in &corpus.examples {
            for t in &ex.tokens {
                *counts.entry(t.as_str()).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_freq)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let n_styles = corpus.n_labels();
        let mut tokens = vec![
            PAD_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
            MASK_TOKEN.to_string(),
        ];
        for k in 0..n_styles {
            tokens.push(format!("<src_{k}>"));
            tokens.push(format!("<dst_{k}>"));
        }
        tokens.extend(kept.into_iter().map(|(t, _)| t.to_string()));
        Vocabulary::from_tokens(tokens, n_styles)
    }

    fn from_tokens(tokens: Vec<String>, n_styles: usize) -> Vocabulary {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            tokens,
            index,
            n_styles,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// First id that is an ordinary token rather than pad/unk/mask/code.
    pub fn first_word_id(&self) -> usize {
        3 + 2 * self.n_styles
    }

    pub fn is_meta(&self, id: usize) -> bool {
        id < self.first_word_id()
    }

    pub fn src_code(&self, style: usize) -> usize {
        debug_assert!(style < self.n_styles);
        3 + 2 * style
    }

    pub fn dst_code(&self, style: usize) -> usize {
        debug_assert!(style < self.n_styles);
        4 + 2 * style
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        fs::write(path, out).map_err(|e| SmlmError::io(path, e))
    }

    /// Loads a vocabulary file, inferring the style count from the reserved
    /// code prefix.
    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = fs::read_to_string(path).map_err(|e| SmlmError::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        let corrupt = |reason: &str| SmlmError::CorruptedArtifact {
            path: path.into(),
            reason: reason.to_string(),
        };
        if tokens.len() < 3
            || tokens[PAD_ID] != PAD_TOKEN
            || tokens[UNK_ID] != UNK_TOKEN
            || tokens[MASK_ID] != MASK_TOKEN
        {
            return Err(corrupt("missing reserved token prefix"));
        }
        let mut n_styles = 0;
        while tokens.get(3 + 2 * n_styles) == Some(&format!("<src_{n_styles}>")) {
            if tokens.get(4 + 2 * n_styles) != Some(&format!("<dst_{n_styles}>")) {
                return Err(corrupt("unpaired style code"));
            }
            n_styles += 1;
        }
        if n_styles == 0 {
            return Err(corrupt("no style codes"));
        }
        let mut seen = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if let Some(prev) = seen.insert(t.clone(), i) {
                return Err(corrupt(&format!("duplicate token `{t}` at ids {prev} and {i}")));
            }
        }
        Ok(Vocabulary::from_tokens(tokens, n_styles))
    }
}

/// Groups example indices by sentence length for batched forward passes.
pub fn group_by_length(lengths: impl Iterator<Item = usize>) -> Vec<Vec<usize>> {
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, len) in lengths.enumerate() {
        match groups.iter_mut().find(|(l, _)| *l == len) {
            Some((_, v)) => v.push(i),
            None => groups.push((len, vec![i])),
        }
    }
    groups.sort_by_key(|(l, _)| *l);
    groups.into_iter().map(|(_, v)| v).collect()
}

/// Recipe for the synthetic style-transfer corpus. Sentences come from
/// shared label-neutral templates whose `STYLE` slots are filled from
/// disjoint per-label lexicons, so the label signal lives entirely in the
/// slot tokens. Slot fill is a pure function of template, slot, and label,
/// which keeps masked tokens recoverable from context plus a style code.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyCorpusSpec {
    pub seed: u64,
    pub train_per_label: usize,
    pub dev_per_label: usize,
    pub test_per_label: usize,
    pub labels: Vec<String>,
    /// Slot vocabulary keyed by label; word lists must be disjoint.
    pub lexicons: BTreeMap<String, Vec<String>>,
    /// Space-separated tokens; the placeholder `STYLE` marks slots.
    pub templates: Vec<String>,
    /// For two-label corpora, also produce gold transfer references by
    /// refilling each test sentence with the opposite label's lexicon.
    pub emit_references: bool,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        ToyCorpusSpec {
            seed: 17,
            train_per_label: 120,
            dev_per_label: 40,
            test_per_label: 40,
            labels: vec!["negative".into(), "positive".into()],
            lexicons: BTreeMap::from([
                (
                    "negative".to_string(),
                    [
                        "bad", "awful", "bland", "dreadful", "horrid", "gloomy", "shabby",
                        "woeful",
                    ]
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
                ),
                (
                    "positive".to_string(),
                    [
                        "good", "great", "tasty", "lovely", "superb", "charming", "delightful",
                        "pleasant",
                    ]
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
                ),
            ]),
            templates: [
                "the STYLE food arrived quickly and the staff kept every table busy .",
                "we found the service STYLE and hard to forget on a rainy evening .",
                "my friends called the little place STYLE before we even saw the menu .",
                "a STYLE spot with a wide view and plenty of seats near the window .",
                "the waiter brought a STYLE plate while the band played an old tune .",
                "locals describe the corner cafe as STYLE even during the crowded market days .",
                "our table got a STYLE dessert after the long wait for fresh bread .",
                "the soup and the tea arrived together with extra napkins and felt STYLE .",
                "reviewers keep writing that the bar is STYLE and honestly the line agrees .",
                "a STYLE meal a fair price and a walk home under bright lamps .",
                "that STYLE little diner near the station serves breakfast until two in the morning .",
                "everyone said the show was STYLE and the lobby photos prove it today .",
                "the chef made a STYLE stew and the room smelled like fresh thyme .",
                "its counter its chairs and its quiet patio all look STYLE this season .",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            emit_references: true,
        }
    }
}

impl ToyCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.labels.len() < 2 {
            return Err(SmlmError::InvalidConfig("need at least two labels".into()));
        }
        for label in &self.labels {
            match self.lexicons.get(label) {
                None => {
                    return Err(SmlmError::InvalidConfig(format!(
                        "missing lexicon for label `{label}`"
                    )));
                }
                Some(words) if words.is_empty() => {
                    return Err(SmlmError::InvalidConfig(format!(
                        "empty lexicon for label `{label}`"
                    )));
                }
                Some(_) => {}
            }
        }
        for key in self.lexicons.keys() {
            if !self.labels.contains(key) {
                return Err(SmlmError::InvalidConfig(format!(
                    "lexicon key `{key}` matches no label"
                )));
            }
        }
        for (i, la) in self.labels.iter().enumerate() {
            for lb in &self.labels[i + 1..] {
                let a = &self.lexicons[la];
                let b = &self.lexicons[lb];
                if a.iter().any(|t| b.contains(t)) {
                    return Err(SmlmError::InvalidConfig(format!(
                        "lexicons for `{la}` and `{lb}` must be disjoint"
                    )));
                }
            }
        }
        for (i, t) in self.templates.iter().enumerate() {
            let toks: Vec<&str> = t.split_whitespace().collect();
            if !toks.contains(&"STYLE") {
                return Err(SmlmError::InvalidConfig(format!(
                    "template {i} has no STYLE slot"
                )));
            }
            for tok in toks {
                if tok != "STYLE" && self.lexicons.values().flatten().any(|w| w == tok) {
                    return Err(SmlmError::InvalidConfig(format!(
                        "template {i} contains lexicon word `{tok}`"
                    )));
                }
            }
        }
        if self.emit_references && self.labels.len() != 2 {
            return Err(SmlmError::InvalidConfig(
                "references need exactly two labels".into(),
            ));
        }
        Ok(())
    }

    /// Fills template `t_idx` for `label`; returns tokens and slot positions.
    fn instantiate(&self, t_idx: usize, label: usize) -> (Vec<String>, Vec<usize>) {
        let lexicon = &self.lexicons[&self.labels[label]];
        let mut tokens = Vec::new();
        let mut planted = Vec::new();
        let mut slot = 0usize;
        for tok in self.templates[t_idx].split_whitespace() {
            if tok == "STYLE" {
                planted.push(tokens.len());
                tokens.push(lexicon[(t_idx + 2 * slot) % lexicon.len()].clone());
                slot += 1;
            } else {
                tokens.push(tok.to_string());
            }
        }
        (tokens, planted)
    }
}

/// One generated split with gold slot positions (and, for binary corpora,
/// opposite-label reference sentences aligned with the examples).
#[derive(Debug, Clone)]
pub struct ToySplit {
    pub corpus: Corpus,
    pub planted: Vec<Vec<usize>>,
    pub references: Option<Vec<Vec<String>>>,
}

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub train: ToySplit,
    pub dev: ToySplit,
    pub test: ToySplit,
}

/// Deterministically generates train/dev/test splits from `spec`. The seed
/// only affects example order within each split.
pub fn generate_toy_corpus(spec: &ToyCorpusSpec) -> Result<ToyCorpus> {
    spec.validate()?;
    let make_split = |per_label: usize, split_idx: u64| -> ToySplit {
        let n_templates = spec.templates.len();
        let mut rows = Vec::new();
        for label in 0..spec.labels.len() {
            for i in 0..per_label {
                let t_idx = (i + 3 * split_idx as usize) % n_templates;
                let (tokens, planted) = spec.instantiate(t_idx, label);
                let reference = spec.emit_references.then(|| {
                    let (ref_tokens, _) = spec.instantiate(t_idx, 1 - label);
                    ref_tokens
                });
                rows.push((LabeledExample { label, tokens }, planted, reference));
            }
        }
        let mut rng = ChaCha20Rng::seed_from_u64(spec.seed.wrapping_add(split_idx));
        rows.shuffle(&mut rng);
        let references = spec
            .emit_references
            .then(|| rows.iter().map(|(_, _, r)| r.clone().unwrap()).collect());
        let planted = rows.iter().map(|(_, p, _)| p.clone()).collect();
        let examples = rows.into_iter().map(|(e, _, _)| e).collect();
        ToySplit {
            corpus: Corpus {
                labels: spec.labels.clone(),
                examples,
            },
            planted,
            references,
        }
    };
    Ok(ToyCorpus {
        train: make_split(spec.train_per_label, 0),
        dev: make_split(spec.dev_per_label, 1),
        test: make_split(spec.test_per_label, 2),
    })
}
