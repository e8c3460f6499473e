//! Pipeline orchestration.
//!
//! One configuration document drives the whole run: corpus preparation,
//! attribution-classifier training, masking, bootstrap and adversarial
//! model training, transfer, and evaluation. Every stage records the
//! content checksums of its inputs and outputs in a manifest; a re-run
//! skips a stage when its fingerprint (config slice plus input checksums)
//! matches a previous completed record and the recorded outputs are still
//! intact on disk. Editing a hyperparameter therefore invalidates exactly
//! the stages that read it.
//!
//! [`Pipeline`] exposes each stage as a method that first ensures its
//! prerequisites, so a subcommand can run "up to masking" and a later full
//! run resumes from the already-finished artifacts.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::{
    attribute_corpus, train_classifier, AttributionMethod, ClassifierConfig, StyleClassifier,
    DEFAULT_IG_STEPS,
};
use crate::corpus::{
    generate_toy_corpus, load_corpus, load_masked, save_corpus, save_masked, Corpus,
    LabeledExample, MaskedExample, ToyCorpusSpec, Vocabulary,
};
use crate::error::{Result, SmlmError};
use crate::eval::{
    compare_attribution_methods, compare_table, eval_classifier_config, evaluate_transfer,
    lambda_sweep, sweep_to_csv, EvalReport, MethodRow, SweepRow,
};
use crate::masking::{mask_corpus, mask_rate, MaskPolicyConfig};
use crate::smlm::{bootstrap_train, finetune, transfer_corpus, Smlm, SmlmConfig};

/// Prefix for environment-variable overrides. After the prefix, `__`
/// separates nesting levels and names are case-insensitive:
/// `SMLM_MASKING__LAMBDA_EPSILON=0.3` sets `masking.lambda_epsilon`.
pub const ENV_PREFIX: &str = "SMLM_";

/// Tokens below this corpus frequency fall back to `<unk>`.
const VOCAB_MIN_FREQ: usize = 1;

/// Default grid for the surplus-margin sweep.
pub const DEFAULT_SWEEP_GRID: [f64; 5] = [0.0, 0.15, 0.3, 0.5, 1.0];

/// Where the corpora come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Toy,
    Files,
}

/// Paths to pre-tokenized corpus files (label TAB space-joined tokens).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilesConfig {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
    /// Label order; empty means infer lexicographically from the training
    /// file.
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub toy: ToyCorpusSpec,
    pub files: FilesConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Toy,
            toy: ToyCorpusSpec::default(),
            files: FilesConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionSettings {
    pub method: AttributionMethod,
    pub ig_steps: usize,
    pub classifier: ClassifierConfig,
}

impl Default for AttributionSettings {
    fn default() -> Self {
        AttributionSettings {
            method: AttributionMethod::EncoderAttention,
            ig_steps: DEFAULT_IG_STEPS,
            classifier: ClassifierConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Configuration of the held-out judge classifier trained during the
    /// eval stage.
    pub classifier: ClassifierConfig,
    /// Re-predict every position during transfer instead of copying
    /// unmasked tokens through.
    pub redecode: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            classifier: eval_classifier_config(0),
            redecode: false,
        }
    }
}

/// The whole run in one document. The top-level `seed` overrides every
/// per-section seed when the pipeline resolves the config, so one value
/// reproduces the run end to end.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub attribution: AttributionSettings,
    pub masking: MaskPolicyConfig,
    pub smlm: SmlmConfig,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("smlm-out"),
            data: DataConfig::default(),
            attribution: AttributionSettings::default(),
            masking: MaskPolicyConfig::default(),
            smlm: SmlmConfig::default(),
            eval: EvalSettings::default(),
        }
    }
}

impl RunConfig {
    /// Propagates the run seed into every stage and validates cross-field
    /// constraints, returning the config the pipeline actually executes.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = self.clone();
        c.data.toy.seed = c.seed;
        c.attribution.classifier.seed = c.seed;
        c.eval.classifier.seed = c.seed;
        c.smlm.seed = c.seed;

        match c.attribution.method {
            AttributionMethod::EncoderAttention if c.attribution.classifier.lambda_con <= 0.0 => {
                return Err(SmlmError::InvalidConfig(
                    "attribution.method = encoder_attention needs attribution.classifier.\
                     lambda_con > 0"
                        .into(),
                ));
            }
            AttributionMethod::VanillaAttention if c.attribution.classifier.lambda_con != 0.0 => {
                return Err(SmlmError::InvalidConfig(
                    "attribution.method = vanilla_attention needs attribution.classifier.\
                     lambda_con = 0"
                        .into(),
                ));
            }
            _ => {}
        }
        if c.masking.lambda_epsilon < 0.0 {
            return Err(SmlmError::InvalidConfig(
                "masking.lambda_epsilon must be non-negative".into(),
            ));
        }
        if c.smlm.model_dim % c.smlm.n_heads != 0 {
            return Err(SmlmError::InvalidConfig(format!(
                "smlm.model_dim {} not divisible by smlm.n_heads {}",
                c.smlm.model_dim, c.smlm.n_heads
            )));
        }
        match c.data.source {
            DataSource::Toy => c.data.toy.validate()?,
            DataSource::Files => {
                for (name, p) in [
                    ("data.files.train", &c.data.files.train),
                    ("data.files.dev", &c.data.files.dev),
                    ("data.files.test", &c.data.files.test),
                ] {
                    if !p.is_file() {
                        return Err(SmlmError::InvalidConfig(format!(
                            "{name} does not exist: {}",
                            p.display()
                        )));
                    }
                }
            }
        }
        Ok(c)
    }
}

fn parse_env_value(raw: &str) -> toml::Value {
    // Reuse the TOML grammar so numbers, booleans, arrays, and quoted
    // strings all work; anything unparseable is a bare string.
    if let Ok(table) = format!("v = {raw}").parse::<toml::Table>() {
        if let Some(v) = table.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

fn apply_override(root: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let path: Vec<String> = key.split("__").map(str::to_ascii_lowercase).collect();
    if path.iter().any(String::is_empty) {
        return Err(SmlmError::InvalidConfig(format!(
            "malformed override key {ENV_PREFIX}{key}"
        )));
    }
    let mut node = root;
    for seg in &path[..path.len() - 1] {
        node = node
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                SmlmError::InvalidConfig(format!(
                    "override {ENV_PREFIX}{key}: `{seg}` is not a table"
                ))
            })?;
    }
    node.insert(
        path.last().expect("non-empty path").clone(),
        parse_env_value(raw),
    );
    Ok(())
}

/// Parses a config document and applies `(key, value)` overrides, where
/// keys are the part after [`ENV_PREFIX`].
pub fn parse_run_config(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut root: toml::Table = text
        .parse()
        .map_err(|e| SmlmError::InvalidConfig(format!("config parse error: {e}")))?;
    for (key, value) in overrides {
        apply_override(&mut root, key, value)?;
    }
    root.try_into()
        .map_err(|e| SmlmError::InvalidConfig(format!("config error: {e}")))
}

/// Overrides currently present in the environment, sorted for determinism.
pub fn env_overrides() -> Vec<(String, String)> {
    let mut v: Vec<(String, String)> = std::env::vars()
        .filter_map(|(k, val)| k.strip_prefix(ENV_PREFIX).map(|rest| (rest.to_string(), val)))
        .collect();
    v.sort();
    v
}

/// Reads a config file and applies environment overrides.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| SmlmError::io(path, e))?;
    parse_run_config(&text, &env_overrides())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn file_checksum(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| SmlmError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    Skipped,
    Failed,
}

/// One manifest entry. Inputs and outputs map artifact paths (relative to
/// the output directory where possible) to content checksums.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub fingerprint: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_ms: u128,
    #[serde(default)]
    pub metrics: Option<serde_json::Value>,
    #[serde(default)]
    pub error: Option<String>,
}

/// Append-only run history plus the latest config snapshot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub config: Option<serde_json::Value>,
    pub stages: Vec<StageRecord>,
}

impl Default for RunManifest {
    fn default() -> Self {
        RunManifest {
            version: 1,
            config: None,
            stages: Vec::new(),
        }
    }
}

pub fn load_manifest(path: &Path) -> Result<RunManifest> {
    if !path.exists() {
        return Ok(RunManifest::default());
    }
    let text = fs::read_to_string(path).map_err(|e| SmlmError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| SmlmError::CorruptedArtifact {
        path: path.to_path_buf(),
        reason: format!("manifest unreadable: {e}"),
    })
}

fn save_manifest(path: &Path, manifest: &RunManifest) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(
        &tmp,
        serde_json::to_string_pretty(manifest).expect("manifest serializes"),
    )
    .map_err(|e| SmlmError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| SmlmError::io(path, e))
}

/// Exclusive ownership of an output directory for the duration of a run.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<DirLock> {
        fs::create_dir_all(dir).map_err(|e| SmlmError::io(dir, e))?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = write!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(SmlmError::io(
                &path,
                std::io::Error::new(
                    std::io::ErrorKind::AlreadyExists,
                    "another run owns this output directory; remove the .lock file if it is stale",
                ),
            )),
            Err(e) => Err(SmlmError::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn rel_key(out_dir: &Path, path: &Path) -> String {
    path.strip_prefix(out_dir)
        .unwrap_or(path)
        .to_string_lossy()
        .into_owned()
}

fn checksum_map(out_dir: &Path, paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| Ok((rel_key(out_dir, p), file_checksum(p)?)))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct StageOutcome {
    pub name: String,
    pub skipped: bool,
    pub wall_ms: u128,
}

struct StageRunner {
    out_dir: PathBuf,
    manifest_path: PathBuf,
    manifest: RunManifest,
    outcomes: Vec<StageOutcome>,
}

impl StageRunner {
    fn open(out_dir: PathBuf) -> Result<StageRunner> {
        let manifest_path = out_dir.join("manifest.json");
        let manifest = load_manifest(&manifest_path)?;
        Ok(StageRunner {
            out_dir,
            manifest_path,
            manifest,
            outcomes: Vec::new(),
        })
    }

    /// Runs or skips one stage. `inputs` must exist (earlier stages
    /// guarantee theirs); `outputs` is the exact set of files `body` will
    /// write.
    fn stage(
        &mut self,
        name: &str,
        config_slice: serde_json::Value,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
        body: impl FnOnce() -> Result<Option<serde_json::Value>>,
    ) -> Result<()> {
        let input_sums = checksum_map(&self.out_dir, inputs)?;
        let fingerprint = sha256_hex(
            format!(
                "{name}\n{}\n{}",
                config_slice,
                serde_json::to_string(&input_sums).expect("map serializes")
            )
            .as_bytes(),
        );

        let previous = self
            .manifest
            .stages
            .iter()
            .rev()
            .find(|r| {
                r.name == name && r.status != StageStatus::Failed && r.fingerprint == fingerprint
            })
            .cloned();
        if let Some(prev) = previous {
            let mut intact = true;
            for (key, recorded) in &prev.outputs {
                let path = self.out_dir.join(key);
                if !path.exists() {
                    intact = false;
                    break;
                }
                let current = file_checksum(&path)?;
                if &current != recorded {
                    return Err(SmlmError::CorruptedArtifact {
                        path,
                        reason: format!(
                            "checksum changed since stage `{name}` wrote it; delete the file or \
                             the output directory to rebuild"
                        ),
                    });
                }
            }
            if intact {
                self.manifest.stages.push(StageRecord {
                    name: name.to_string(),
                    status: StageStatus::Skipped,
                    fingerprint,
                    inputs: input_sums,
                    outputs: prev.outputs.clone(),
                    wall_ms: 0,
                    metrics: prev.metrics.clone(),
                    error: None,
                });
                save_manifest(&self.manifest_path, &self.manifest)?;
                self.outcomes.push(StageOutcome {
                    name: name.to_string(),
                    skipped: true,
                    wall_ms: 0,
                });
                return Ok(());
            }
        }

        log::info!("running stage {name}");
        let started = Instant::now();
        let result = body();
        let wall_ms = started.elapsed().as_millis();
        match result {
            Err(e) => {
                self.manifest.stages.push(StageRecord {
                    name: name.to_string(),
                    status: StageStatus::Failed,
                    fingerprint,
                    inputs: input_sums,
                    outputs: BTreeMap::new(),
                    wall_ms,
                    metrics: None,
                    error: Some(e.to_string()),
                });
                save_manifest(&self.manifest_path, &self.manifest)?;
                Err(e)
            }
            Ok(metrics) => {
                let output_sums = checksum_map(&self.out_dir, outputs)?;
                self.manifest.stages.push(StageRecord {
                    name: name.to_string(),
                    status: StageStatus::Completed,
                    fingerprint,
                    inputs: input_sums,
                    outputs: output_sums,
                    wall_ms,
                    metrics,
                    error: None,
                });
                save_manifest(&self.manifest_path, &self.manifest)?;
                self.outcomes.push(StageOutcome {
                    name: name.to_string(),
                    skipped: false,
                    wall_ms,
                });
                Ok(())
            }
        }
    }
}

/// Filesystem layout of one run directory.
struct Paths {
    train: PathBuf,
    dev: PathBuf,
    test: PathBuf,
    labels: PathBuf,
    planted: PathBuf,
    references: PathBuf,
    vocab: PathBuf,
    attr_dir: PathBuf,
    attr_meta: PathBuf,
    attr_weights: PathBuf,
    attr_history: PathBuf,
    masked_train: PathBuf,
    masked_dev: PathBuf,
    masked_test: PathBuf,
    mask_stats: PathBuf,
    bootstrap_dir: PathBuf,
    bootstrap_config: PathBuf,
    bootstrap_weights: PathBuf,
    bootstrap_history: PathBuf,
    finetuned_dir: PathBuf,
    finetuned_config: PathBuf,
    finetuned_weights: PathBuf,
    finetune_report: PathBuf,
    outputs: PathBuf,
    judge_dir: PathBuf,
    report_json: PathBuf,
    report_txt: PathBuf,
    sweep_csv: PathBuf,
    sweep_json: PathBuf,
    compare_json: PathBuf,
    compare_txt: PathBuf,
}

impl Paths {
    fn new(out: &Path) -> Paths {
        let corpus = out.join("corpus");
        let attr_dir = out.join("attr");
        let masked = out.join("masked");
        let smlm = out.join("smlm");
        let bootstrap_dir = smlm.join("bootstrap");
        let finetuned_dir = smlm.join("finetuned");
        let eval = out.join("eval");
        Paths {
            train: corpus.join("train.tsv"),
            dev: corpus.join("dev.tsv"),
            test: corpus.join("test.tsv"),
            labels: corpus.join("labels.json"),
            planted: corpus.join("planted.json"),
            references: corpus.join("references.tsv"),
            vocab: out.join("vocab.txt"),
            attr_meta: attr_dir.join("meta.json"),
            attr_weights: attr_dir.join("weights.bin"),
            attr_history: attr_dir.join("history.json"),
            attr_dir,
            masked_train: masked.join("train.tsv"),
            masked_dev: masked.join("dev.tsv"),
            masked_test: masked.join("test.tsv"),
            mask_stats: masked.join("stats.json"),
            bootstrap_config: bootstrap_dir.join("config.json"),
            bootstrap_weights: bootstrap_dir.join("weights.bin"),
            bootstrap_history: smlm.join("bootstrap_history.json"),
            bootstrap_dir,
            finetuned_config: finetuned_dir.join("config.json"),
            finetuned_weights: finetuned_dir.join("weights.bin"),
            finetune_report: smlm.join("finetune_report.json"),
            finetuned_dir,
            outputs: out.join("transfer").join("outputs.tsv"),
            judge_dir: eval.join("eval_classifier"),
            report_json: eval.join("report.json"),
            report_txt: eval.join("report.txt"),
            sweep_csv: out.join("sweep").join("sweep.csv"),
            sweep_json: out.join("sweep").join("rows.json"),
            compare_json: out.join("compare").join("report.json"),
            compare_txt: out.join("compare").join("table.txt"),
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| SmlmError::io(parent, e))?;
    }
    fs::write(
        path,
        serde_json::to_string_pretty(value).expect("value serializes"),
    )
    .map_err(|e| SmlmError::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| SmlmError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| SmlmError::CorruptedArtifact {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Fields of the model config that the bootstrap stage reads; fine-tune
/// knobs are excluded so editing them re-runs only the fine-tune stage.
fn bootstrap_slice(c: &SmlmConfig) -> serde_json::Value {
    serde_json::json!({
        "model_dim": c.model_dim,
        "n_layers": c.n_layers,
        "n_heads": c.n_heads,
        "ff_dim": c.ff_dim,
        "max_len": c.max_len,
        "bootstrap_epochs": c.bootstrap_epochs,
        "lr": c.lr,
        "batch_size": c.batch_size,
        "clip_norm": c.clip_norm,
        "masked_loss_only": c.masked_loss_only,
        "seed": c.seed,
    })
}

/// Writes a generated toy corpus (with planted positions, references when
/// binary, and a vocabulary) to flat files.
struct ToyLayout<'a> {
    train: &'a Path,
    dev: &'a Path,
    test: &'a Path,
    labels: &'a Path,
    planted: &'a Path,
    references: Option<&'a Path>,
    vocab: &'a Path,
}

fn emit_toy(spec: &ToyCorpusSpec, layout: &ToyLayout<'_>) -> Result<()> {
    let toy = generate_toy_corpus(spec)?;
    write_json(
        layout.planted,
        &serde_json::json!({
            "train": toy.train.planted,
            "dev": toy.dev.planted,
            "test": toy.test.planted,
        }),
    )?;
    if let (Some(path), Some(refs)) = (layout.references, &toy.test.references) {
        let flipped = Corpus {
            labels: toy.test.corpus.labels.clone(),
            examples: toy
                .test
                .corpus
                .examples
                .iter()
                .zip(refs)
                .map(|(ex, tokens)| LabeledExample {
                    label: 1 - ex.label,
                    tokens: tokens.clone(),
                })
                .collect(),
        };
        save_corpus(path, &flipped)?;
    }
    save_corpus(layout.train, &toy.train.corpus)?;
    save_corpus(layout.dev, &toy.dev.corpus)?;
    save_corpus(layout.test, &toy.test.corpus)?;
    write_json(layout.labels, &toy.train.corpus.labels)?;
    Vocabulary::build(&toy.train.corpus, VOCAB_MIN_FREQ).save(layout.vocab)?;
    Ok(())
}

/// Generates toy corpus files into `out_dir` (flat layout) with a manifest
/// entry, returning the files written.
pub fn gen_toy(spec: &ToyCorpusSpec, out_dir: &Path) -> Result<Vec<PathBuf>> {
    spec.validate()?;
    let _lock = DirLock::acquire(out_dir)?;
    let mut runner = StageRunner::open(out_dir.to_path_buf())?;
    runner.manifest.config = Some(serde_json::to_value(spec).expect("spec serializes"));
    let references = spec.emit_references && spec.labels.len() == 2;
    let mut outputs = vec![
        out_dir.join("train.tsv"),
        out_dir.join("dev.tsv"),
        out_dir.join("test.tsv"),
        out_dir.join("labels.json"),
        out_dir.join("planted.json"),
        out_dir.join("vocab.txt"),
    ];
    if references {
        outputs.push(out_dir.join("references.tsv"));
    }
    {
        let spec = spec.clone();
        let out = out_dir.to_path_buf();
        runner.stage(
            "gen-toy",
            serde_json::json!({
                "spec": serde_json::to_value(&spec).expect("spec serializes"),
                "vocab_min_freq": VOCAB_MIN_FREQ,
            }),
            &[],
            &outputs,
            move || {
                let references_path = out.join("references.tsv");
                emit_toy(
                    &spec,
                    &ToyLayout {
                        train: &out.join("train.tsv"),
                        dev: &out.join("dev.tsv"),
                        test: &out.join("test.tsv"),
                        labels: &out.join("labels.json"),
                        planted: &out.join("planted.json"),
                        references: references.then_some(references_path.as_path()),
                        vocab: &out.join("vocab.txt"),
                    },
                )?;
                Ok(None)
            },
        )?;
    }
    Ok(outputs)
}

/// A run directory with staged execution and resume.
pub struct Pipeline {
    config: RunConfig,
    paths: Paths,
    runner: StageRunner,
    done: BTreeSet<&'static str>,
    _lock: DirLock,
}

impl Pipeline {
    /// Resolves and validates the config, locks the output directory, and
    /// loads the manifest. The lock is held until the pipeline is dropped.
    pub fn open(config: &RunConfig) -> Result<Pipeline> {
        let config = config.resolve()?;
        let lock = DirLock::acquire(&config.out_dir)?;
        let mut runner = StageRunner::open(config.out_dir.clone())?;
        runner.manifest.config = Some(serde_json::to_value(&config).expect("config serializes"));
        let paths = Paths::new(&config.out_dir);
        Ok(Pipeline {
            paths,
            runner,
            done: BTreeSet::new(),
            _lock: lock,
            config,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn outcomes(&self) -> &[StageOutcome] {
        &self.runner.outcomes
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.runner.manifest_path.clone()
    }

    fn has_references(&self) -> bool {
        self.config.data.source == DataSource::Toy
            && self.config.data.toy.emit_references
            && self.config.data.toy.labels.len() == 2
    }

    fn labels(&self) -> Result<Vec<String>> {
        read_json(&self.paths.labels)
    }

    fn load_split(&self, path: &Path, labels: &[String]) -> Result<Corpus> {
        load_corpus(path, Some(labels))
    }

    /// Prepares corpora, label order, and the vocabulary.
    pub fn corpus(&mut self) -> Result<()> {
        if !self.done.insert("corpus") {
            return Ok(());
        }
        let is_toy = self.config.data.source == DataSource::Toy;
        let mut outputs = vec![
            self.paths.train.clone(),
            self.paths.dev.clone(),
            self.paths.test.clone(),
            self.paths.labels.clone(),
            self.paths.vocab.clone(),
        ];
        if is_toy {
            outputs.push(self.paths.planted.clone());
            if self.has_references() {
                outputs.push(self.paths.references.clone());
            }
        }
        let inputs: Vec<PathBuf> = if is_toy {
            Vec::new()
        } else {
            vec![
                self.config.data.files.train.clone(),
                self.config.data.files.dev.clone(),
                self.config.data.files.test.clone(),
            ]
        };
        let data = self.config.data.clone();
        let has_refs = self.has_references();
        let train_path = self.paths.train.clone();
        let dev_path = self.paths.dev.clone();
        let test_path = self.paths.test.clone();
        let labels_path = self.paths.labels.clone();
        let planted_path = self.paths.planted.clone();
        let references_path = self.paths.references.clone();
        let vocab_path = self.paths.vocab.clone();
        self.runner.stage(
            "corpus",
            serde_json::json!({
                "data": serde_json::to_value(&data).expect("data serializes"),
                "vocab_min_freq": VOCAB_MIN_FREQ,
            }),
            &inputs,
            &outputs,
            move || {
                if let Some(dir) = train_path.parent() {
                    fs::create_dir_all(dir).map_err(|e| SmlmError::io(dir, e))?;
                }
                match data.source {
                    DataSource::Toy => emit_toy(
                        &data.toy,
                        &ToyLayout {
                            train: &train_path,
                            dev: &dev_path,
                            test: &test_path,
                            labels: &labels_path,
                            planted: &planted_path,
                            references: has_refs.then_some(references_path.as_path()),
                            vocab: &vocab_path,
                        },
                    )?,
                    DataSource::Files => {
                        let label_list: Option<&[String]> = if data.files.labels.is_empty() {
                            None
                        } else {
                            Some(&data.files.labels)
                        };
                        let train = load_corpus(&data.files.train, label_list)?;
                        let dev = load_corpus(&data.files.dev, Some(&train.labels))?;
                        let test = load_corpus(&data.files.test, Some(&train.labels))?;
                        save_corpus(&train_path, &train)?;
                        save_corpus(&dev_path, &dev)?;
                        save_corpus(&test_path, &test)?;
                        write_json(&labels_path, &train.labels)?;
                        Vocabulary::build(&train, VOCAB_MIN_FREQ).save(&vocab_path)?;
                    }
                }
                Ok(None)
            },
        )
    }

    /// Trains the attribution classifier.
    pub fn train_attr(&mut self) -> Result<()> {
        self.corpus()?;
        if !self.done.insert("train-attr") {
            return Ok(());
        }
        let labels = self.labels()?;
        let train = self.load_split(&self.paths.train, &labels)?;
        let dev = self.load_split(&self.paths.dev, &labels)?;
        let vocab = Vocabulary::load(&self.paths.vocab)?;
        let cls_config = self.config.attribution.classifier.clone();
        let attr_dir = self.paths.attr_dir.clone();
        let attr_history = self.paths.attr_history.clone();
        self.runner.stage(
            "train-attr",
            serde_json::to_value(&cls_config).expect("config serializes"),
            &[
                self.paths.train.clone(),
                self.paths.dev.clone(),
                self.paths.vocab.clone(),
                self.paths.labels.clone(),
            ],
            &[
                self.paths.attr_meta.clone(),
                self.paths.attr_weights.clone(),
                self.paths.attr_history.clone(),
            ],
            move || {
                let (classifier, history) = train_classifier(&train, &dev, &vocab, &cls_config)?;
                classifier.save(&attr_dir)?;
                write_json(&attr_history, &history)?;
                Ok(Some(serde_json::to_value(&history).expect("serializes")))
            },
        )
    }

    /// Masks all three splits with the configured attribution method.
    pub fn mask(&mut self) -> Result<()> {
        self.train_attr()?;
        if !self.done.insert("mask") {
            return Ok(());
        }
        let labels = self.labels()?;
        let train = self.load_split(&self.paths.train, &labels)?;
        let dev = self.load_split(&self.paths.dev, &labels)?;
        let test = self.load_split(&self.paths.test, &labels)?;
        let vocab = Vocabulary::load(&self.paths.vocab)?;
        let method = self.config.attribution.method;
        let ig_steps = self.config.attribution.ig_steps;
        let lambda = self.config.masking.lambda_epsilon;
        let attr_dir = self.paths.attr_dir.clone();
        let outs = [
            self.paths.masked_train.clone(),
            self.paths.masked_dev.clone(),
            self.paths.masked_test.clone(),
            self.paths.mask_stats.clone(),
        ];
        let body_outs = outs.clone();
        self.runner.stage(
            "mask",
            serde_json::json!({
                "method": method.short_name(),
                "ig_steps": ig_steps,
                "lambda_epsilon": lambda,
            }),
            &[
                self.paths.train.clone(),
                self.paths.dev.clone(),
                self.paths.test.clone(),
                self.paths.vocab.clone(),
                self.paths.attr_meta.clone(),
                self.paths.attr_weights.clone(),
            ],
            &outs,
            move || {
                if let Some(dir) = body_outs[0].parent() {
                    fs::create_dir_all(dir).map_err(|e| SmlmError::io(dir, e))?;
                }
                let classifier = StyleClassifier::load(&attr_dir)?;
                let mut stats = serde_json::Map::new();
                for (split, corpus, path) in [
                    ("train", &train, &body_outs[0]),
                    ("dev", &dev, &body_outs[1]),
                    ("test", &test, &body_outs[2]),
                ] {
                    let attrs = attribute_corpus(&classifier, method, corpus, &vocab, ig_steps)?;
                    let scores: Vec<Vec<f64>> = attrs.into_iter().map(|a| a.scores).collect();
                    let masked = mask_corpus(corpus, &scores, lambda)?;
                    save_masked(path, &masked, &labels)?;
                    stats.insert(split.into(), serde_json::json!(mask_rate(&masked)));
                }
                let stats = serde_json::Value::Object(stats);
                write_json(&body_outs[3], &stats)?;
                Ok(Some(stats))
            },
        )
    }

    /// Bootstrap reconstruction training.
    pub fn train_smlm(&mut self) -> Result<()> {
        self.mask()?;
        if !self.done.insert("train-smlm") {
            return Ok(());
        }
        let labels = self.labels()?;
        let train = self.load_split(&self.paths.train, &labels)?;
        let dev = self.load_split(&self.paths.dev, &labels)?;
        let masked_train = load_masked(&self.paths.masked_train, &labels)?;
        let masked_dev = load_masked(&self.paths.masked_dev, &labels)?;
        let vocab = Vocabulary::load(&self.paths.vocab)?;
        let smlm_config = self.config.smlm.clone();
        let n_styles = labels.len();
        let bootstrap_dir = self.paths.bootstrap_dir.clone();
        let bootstrap_history = self.paths.bootstrap_history.clone();
        self.runner.stage(
            "train-smlm",
            bootstrap_slice(&smlm_config),
            &[
                self.paths.masked_train.clone(),
                self.paths.masked_dev.clone(),
                self.paths.train.clone(),
                self.paths.dev.clone(),
                self.paths.vocab.clone(),
            ],
            &[
                self.paths.bootstrap_config.clone(),
                self.paths.bootstrap_weights.clone(),
                self.paths.bootstrap_history.clone(),
            ],
            move || {
                let mut model = Smlm::new(vocab.len(), n_styles, &smlm_config)?;
                log::info!("reconstruction model has {} parameters", model.param_count());
                let history =
                    bootstrap_train(&mut model, &masked_train, &train, &masked_dev, &dev, &vocab)?;
                model.save(&bootstrap_dir)?;
                write_json(&bootstrap_history, &history)?;
                Ok(Some(serde_json::to_value(&history).expect("serializes")))
            },
        )
    }

    /// Adversarial fine-tuning on top of the bootstrap checkpoint.
    pub fn finetune(&mut self) -> Result<()> {
        self.train_smlm()?;
        if !self.done.insert("finetune") {
            return Ok(());
        }
        let labels = self.labels()?;
        let train = self.load_split(&self.paths.train, &labels)?;
        let masked_train = load_masked(&self.paths.masked_train, &labels)?;
        let vocab = Vocabulary::load(&self.paths.vocab)?;
        let smlm_config = self.config.smlm.clone();
        let bootstrap_dir = self.paths.bootstrap_dir.clone();
        let finetuned_dir = self.paths.finetuned_dir.clone();
        let finetune_report = self.paths.finetune_report.clone();
        self.runner.stage(
            "finetune",
            serde_json::to_value(&smlm_config).expect("config serializes"),
            &[
                self.paths.bootstrap_config.clone(),
                self.paths.bootstrap_weights.clone(),
                self.paths.masked_train.clone(),
                self.paths.train.clone(),
                self.paths.vocab.clone(),
            ],
            &[
                self.paths.finetuned_config.clone(),
                self.paths.finetuned_weights.clone(),
                self.paths.finetune_report.clone(),
            ],
            move || {
                let mut model = Smlm::load(&bootstrap_dir)?;
                // The checkpoint holds the bootstrap-time config; fine-tune
                // knobs may have been edited since.
                model.config = smlm_config;
                let report = finetune(&mut model, &masked_train, &train, &vocab)?;
                model.save(&finetuned_dir)?;
                write_json(&finetune_report, &report)?;
                Ok(Some(serde_json::to_value(&report).expect("serializes")))
            },
        )
    }

    /// Transfers the held-out masked test split toward the next style.
    pub fn transfer(&mut self) -> Result<()> {
        self.finetune()?;
        if !self.done.insert("transfer") {
            return Ok(());
        }
        let labels = self.labels()?;
        let masked_test = load_masked(&self.paths.masked_test, &labels)?;
        let vocab = Vocabulary::load(&self.paths.vocab)?;
        let redecode = self.config.eval.redecode;
        let finetuned_dir = self.paths.finetuned_dir.clone();
        let outputs_path = self.paths.outputs.clone();
        self.runner.stage(
            "transfer",
            serde_json::json!({ "redecode": redecode }),
            &[
                self.paths.finetuned_config.clone(),
                self.paths.finetuned_weights.clone(),
                self.paths.masked_test.clone(),
                self.paths.vocab.clone(),
            ],
            &[self.paths.outputs.clone()],
            move || {
                if let Some(dir) = outputs_path.parent() {
                    fs::create_dir_all(dir).map_err(|e| SmlmError::io(dir, e))?;
                }
                let model = Smlm::load(&finetuned_dir)?;
                let n_styles = labels.len();
                let outputs = transfer_corpus(
                    &model,
                    &vocab,
                    &masked_test,
                    |m| (m.label + 1) % n_styles,
                    redecode,
                )?;
                let out_corpus = Corpus {
                    labels: labels.clone(),
                    examples: masked_test
                        .iter()
                        .zip(outputs)
                        .map(|(m, tokens)| LabeledExample {
                            label: (m.label + 1) % n_styles,
                            tokens,
                        })
                        .collect(),
                };
                save_corpus(&outputs_path, &out_corpus)?;
                Ok(None)
            },
        )
    }

    /// Trains the judge classifier, scores the transfer outputs, and
    /// returns the report.
    pub fn eval(&mut self) -> Result<EvalReport> {
        self.transfer()?;
        if self.done.insert("eval") {
            let labels = self.labels()?;
            let train = self.load_split(&self.paths.train, &labels)?;
            let dev = self.load_split(&self.paths.dev, &labels)?;
            let test = self.load_split(&self.paths.test, &labels)?;
            let masked_test = load_masked(&self.paths.masked_test, &labels)?;
            let vocab = Vocabulary::load(&self.paths.vocab)?;
            let judge_config = self.config.eval.classifier.clone();
            let has_refs = self.has_references();
            let references_path = self.paths.references.clone();
            let outputs_path = self.paths.outputs.clone();
            let judge_dir = self.paths.judge_dir.clone();
            let report_json = self.paths.report_json.clone();
            let report_txt = self.paths.report_txt.clone();
            let mut eval_inputs = vec![
                self.paths.outputs.clone(),
                self.paths.masked_test.clone(),
                self.paths.train.clone(),
                self.paths.dev.clone(),
                self.paths.test.clone(),
                self.paths.vocab.clone(),
            ];
            if has_refs {
                eval_inputs.push(references_path.clone());
            }
            self.runner.stage(
                "eval",
                serde_json::to_value(&judge_config).expect("config serializes"),
                &eval_inputs,
                &[
                    self.paths.judge_dir.join("meta.json"),
                    self.paths.judge_dir.join("weights.bin"),
                    self.paths.report_json.clone(),
                    self.paths.report_txt.clone(),
                ],
                move || {
                    let (judge, _) = train_classifier(&train, &dev, &vocab, &judge_config)?;
                    judge.save(&judge_dir)?;
                    let out_corpus = load_corpus(&outputs_path, Some(&labels))?;
                    let outputs: Vec<Vec<String>> =
                        out_corpus.examples.iter().map(|e| e.tokens.clone()).collect();
                    let targets: Vec<usize> =
                        out_corpus.examples.iter().map(|e| e.label).collect();
                    let references: Option<Vec<Vec<String>>> = if has_refs {
                        let refs = load_corpus(&references_path, Some(&labels))?;
                        Some(refs.examples.into_iter().map(|e| e.tokens).collect())
                    } else {
                        None
                    };
                    let report = evaluate_transfer(
                        &judge.model,
                        &vocab,
                        &test,
                        &outputs,
                        &targets,
                        references.as_deref(),
                        mask_rate(&masked_test),
                    )?;
                    write_json(&report_json, &report)?;
                    fs::write(&report_txt, report.render_table())
                        .map_err(|e| SmlmError::io(&report_txt, e))?;
                    Ok(Some(serde_json::to_value(&report).expect("serializes")))
                },
            )?;
        }
        read_json(&self.paths.report_json)
    }

    /// Surplus-margin sweep on the dev split; returns the rows and writes
    /// a CSV artifact.
    pub fn sweep(&mut self, grid: &[f64]) -> Result<(Vec<SweepRow>, PathBuf)> {
        self.train_attr()?;
        if grid.is_empty() {
            return Err(SmlmError::InvalidConfig("empty sweep grid".into()));
        }
        let labels = self.labels()?;
        let train = self.load_split(&self.paths.train, &labels)?;
        let dev = self.load_split(&self.paths.dev, &labels)?;
        let vocab = Vocabulary::load(&self.paths.vocab)?;
        let method = self.config.attribution.method;
        let ig_steps = self.config.attribution.ig_steps;
        let judge_config = self.config.eval.classifier.clone();
        let attr_dir = self.paths.attr_dir.clone();
        let sweep_csv = self.paths.sweep_csv.clone();
        let sweep_json = self.paths.sweep_json.clone();
        let grid_vec = grid.to_vec();
        self.runner.stage(
            "sweep",
            serde_json::json!({
                "grid": grid_vec,
                "method": method.short_name(),
                "ig_steps": ig_steps,
                "judge": serde_json::to_value(&judge_config).expect("serializes"),
            }),
            &[
                self.paths.train.clone(),
                self.paths.dev.clone(),
                self.paths.vocab.clone(),
                self.paths.attr_meta.clone(),
                self.paths.attr_weights.clone(),
            ],
            &[self.paths.sweep_csv.clone(), self.paths.sweep_json.clone()],
            move || {
                let classifier = StyleClassifier::load(&attr_dir)?;
                let attrs = attribute_corpus(&classifier, method, &dev, &vocab, ig_steps)?;
                let scores: Vec<Vec<f64>> = attrs.into_iter().map(|a| a.scores).collect();
                let (judge, _) = train_classifier(&train, &dev, &vocab, &judge_config)?;
                let rows = lambda_sweep(&judge.model, &vocab, &dev, &scores, &grid_vec)?;
                if let Some(dir) = sweep_csv.parent() {
                    fs::create_dir_all(dir).map_err(|e| SmlmError::io(dir, e))?;
                }
                fs::write(&sweep_csv, sweep_to_csv(&rows))
                    .map_err(|e| SmlmError::io(&sweep_csv, e))?;
                write_json(&sweep_json, &rows)?;
                Ok(Some(serde_json::to_value(&rows).expect("serializes")))
            },
        )?;
        let rows: Vec<SweepRow> = read_json(&self.paths.sweep_json)?;
        Ok((rows, self.paths.sweep_csv.clone()))
    }

    /// Scores every attribution method's masking on the dev split against
    /// one fixed judge. Trains a conicity-regularized classifier and a
    /// plain one so each method reads the classifier it is valid for.
    pub fn compare_attr(&mut self) -> Result<(Vec<MethodRow>, PathBuf)> {
        self.corpus()?;
        let labels = self.labels()?;
        let train = self.load_split(&self.paths.train, &labels)?;
        let dev = self.load_split(&self.paths.dev, &labels)?;
        let vocab = Vocabulary::load(&self.paths.vocab)?;
        let base = self.config.attribution.classifier.clone();
        let mut regularized_config = base.clone();
        if regularized_config.lambda_con <= 0.0 {
            regularized_config.lambda_con = ClassifierConfig::default().lambda_con;
        }
        let mut plain_config = base;
        plain_config.lambda_con = 0.0;
        let judge_config = self.config.eval.classifier.clone();
        let lambda = self.config.masking.lambda_epsilon;
        let compare_json = self.paths.compare_json.clone();
        let compare_txt = self.paths.compare_txt.clone();
        self.runner.stage(
            "compare-attr",
            serde_json::json!({
                "regularized": serde_json::to_value(&regularized_config).expect("serializes"),
                "plain": serde_json::to_value(&plain_config).expect("serializes"),
                "judge": serde_json::to_value(&judge_config).expect("serializes"),
                "lambda_epsilon": lambda,
            }),
            &[
                self.paths.train.clone(),
                self.paths.dev.clone(),
                self.paths.vocab.clone(),
            ],
            &[self.paths.compare_json.clone(), self.paths.compare_txt.clone()],
            move || {
                let (regularized, _) =
                    train_classifier(&train, &dev, &vocab, &regularized_config)?;
                let (plain, _) = train_classifier(&train, &dev, &vocab, &plain_config)?;
                let (judge, _) = train_classifier(&train, &dev, &vocab, &judge_config)?;
                let rows = compare_attribution_methods(
                    &judge.model,
                    &regularized,
                    &plain,
                    &vocab,
                    &dev,
                    lambda,
                )?;
                write_json(&compare_json, &rows)?;
                if let Some(dir) = compare_txt.parent() {
                    fs::create_dir_all(dir).map_err(|e| SmlmError::io(dir, e))?;
                }
                fs::write(&compare_txt, compare_table(&rows))
                    .map_err(|e| SmlmError::io(&compare_txt, e))?;
                Ok(Some(serde_json::to_value(&rows).expect("serializes")))
            },
        )?;
        let rows: Vec<MethodRow> = read_json(&self.paths.compare_json)?;
        Ok((rows, self.paths.compare_txt.clone()))
    }

    /// Standalone transfer of a masked file with an explicit destination
    /// style, outside the staged run (no manifest entry).
    pub fn transfer_file(
        model_dir: &Path,
        vocab_path: &Path,
        labels_path: &Path,
        input: &Path,
        dst_label: &str,
        redecode: bool,
    ) -> Result<(Corpus, Vec<MaskedExample>)> {
        let labels: Vec<String> = read_json(labels_path)?;
        let dst = labels
            .iter()
            .position(|l| l == dst_label)
            .ok_or_else(|| SmlmError::UnknownLabel(dst_label.to_string()))?;
        let vocab = Vocabulary::load(vocab_path)?;
        let masked = load_masked(input, &labels)?;
        let model = Smlm::load(model_dir)?;
        let outputs = transfer_corpus(&model, &vocab, &masked, |_| dst, redecode)?;
        let corpus = Corpus {
            labels,
            examples: outputs
                .into_iter()
                .map(|tokens| LabeledExample { label: dst, tokens })
                .collect(),
        };
        Ok((corpus, masked))
    }
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub report: EvalReport,
    pub stages: Vec<StageOutcome>,
    pub manifest_path: PathBuf,
}

/// Runs every stage in order, resuming where fingerprints allow, and
/// returns the final evaluation report.
pub fn run_pipeline(config: &RunConfig) -> Result<PipelineOutcome> {
    let mut pipeline = Pipeline::open(config)?;
    let report = pipeline.eval()?;
    Ok(PipelineOutcome {
        report,
        manifest_path: pipeline.manifest_path(),
        stages: pipeline.runner.outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_config(out_dir: &Path) -> RunConfig {
        let mut c = RunConfig {
            seed: 11,
            out_dir: out_dir.to_path_buf(),
            ..RunConfig::default()
        };
        c.data.toy.train_per_label = 24;
        c.data.toy.dev_per_label = 8;
        c.data.toy.test_per_label = 8;
        c.attribution.classifier.embed_dim = 32;
        c.attribution.classifier.hidden_dim = 32;
        c.attribution.classifier.epochs = 3;
        c.eval.classifier.embed_dim = 32;
        c.eval.classifier.hidden_dim = 32;
        c.eval.classifier.epochs = 3;
        c.smlm.model_dim = 32;
        c.smlm.n_layers = 1;
        c.smlm.n_heads = 4;
        c.smlm.ff_dim = 64;
        c.smlm.bootstrap_epochs = 2;
        c
    }

    #[test]
    fn config_parse_applies_env_style_overrides() {
        let text = r#"
            seed = 3
            out_dir = "somewhere"

            [masking]
            lambda_epsilon = 0.3

            [smlm]
            model_dim = 128
        "#;
        let overrides = vec![
            ("MASKING__LAMBDA_EPSILON".to_string(), "0.5".to_string()),
            ("SEED".to_string(), "9".to_string()),
            (
                "ATTRIBUTION__METHOD".to_string(),
                "integrated_gradients".to_string(),
            ),
        ];
        let config = parse_run_config(text, &overrides).unwrap();
        assert_eq!(config.seed, 9);
        assert_eq!(config.masking.lambda_epsilon, 0.5);
        assert_eq!(config.smlm.model_dim, 128);
        assert_eq!(
            config.attribution.method,
            AttributionMethod::IntegratedGradients
        );
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_method_pairings() {
        assert!(parse_run_config("smlm = { model_dmi = 3 }", &[]).is_err());

        let text = r#"
            [attribution]
            method = "vanilla_attention"
        "#;
        // Default classifier keeps the conicity penalty on, which vanilla
        // attention rejects.
        let config = parse_run_config(text, &[]).unwrap();
        assert!(matches!(config.resolve(), Err(SmlmError::InvalidConfig(_))));
    }

    #[test]
    fn seed_propagates_into_every_stage_config() {
        let config = parse_run_config("seed = 77", &[])
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(config.data.toy.seed, 77);
        assert_eq!(config.attribution.classifier.seed, 77);
        assert_eq!(config.eval.classifier.seed, 77);
        assert_eq!(config.smlm.seed, 77);
    }

    #[test]
    fn stage_runner_skips_on_matching_fingerprint_and_flags_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        let artifact = out.join("a.txt");
        let run_once = |manifest: RunManifest, content: &'static str| -> (RunManifest, bool) {
            let mut runner = StageRunner {
                out_dir: out.to_path_buf(),
                manifest_path: out.join("manifest.json"),
                manifest,
                outcomes: Vec::new(),
            };
            let artifact = artifact.clone();
            runner
                .stage(
                    "demo",
                    serde_json::json!({"k": 1}),
                    &[],
                    &[artifact.clone()],
                    move || {
                        fs::write(&artifact, content).unwrap();
                        Ok(None)
                    },
                )
                .unwrap();
            let skipped = runner.outcomes[0].skipped;
            (runner.manifest, skipped)
        };

        let (manifest, skipped) = run_once(RunManifest::default(), "hello");
        assert!(!skipped);
        let (manifest, skipped) = run_once(manifest, "hello");
        assert!(skipped, "unchanged stage should be skipped");
        assert_eq!(manifest.stages.len(), 2);

        // Tamper with the artifact: the stage must refuse to reuse it.
        fs::write(&artifact, "tampered").unwrap();
        let mut runner = StageRunner {
            out_dir: out.to_path_buf(),
            manifest_path: out.join("manifest.json"),
            manifest,
            outcomes: Vec::new(),
        };
        let err = runner
            .stage(
                "demo",
                serde_json::json!({"k": 1}),
                &[],
                &[artifact.clone()],
                || panic!("body must not run on corruption"),
            )
            .unwrap_err();
        match err {
            SmlmError::CorruptedArtifact { path, .. } => assert_eq!(path, artifact),
            other => panic!("expected corruption error, got {other}"),
        }
    }

    #[test]
    fn failed_stage_is_recorded_and_retried() {
        let dir = tempfile::tempdir().unwrap();
        let mut runner = StageRunner::open(dir.path().to_path_buf()).unwrap();
        let err = runner
            .stage("boom", serde_json::json!({}), &[], &[], || {
                Err(SmlmError::Diverged("loss went non-finite".into()))
            })
            .unwrap_err();
        assert!(matches!(err, SmlmError::Diverged(_)));
        let manifest = load_manifest(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(manifest.stages.len(), 1);
        assert_eq!(manifest.stages[0].status, StageStatus::Failed);
        assert!(manifest.stages[0]
            .error
            .as_deref()
            .unwrap()
            .contains("non-finite"));

        // A failed record never satisfies resume; the stage runs again.
        let mut runner = StageRunner::open(dir.path().to_path_buf()).unwrap();
        runner
            .stage("boom", serde_json::json!({}), &[], &[], || Ok(None))
            .unwrap();
        assert!(!runner.outcomes[0].skipped);
    }

    #[test]
    fn lock_file_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = DirLock::acquire(dir.path()).unwrap();
        assert!(DirLock::acquire(dir.path()).is_err());
        drop(lock);
        assert!(DirLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn gen_toy_writes_files_and_is_seed_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToyCorpusSpec {
            train_per_label: 6,
            dev_per_label: 2,
            test_per_label: 2,
            ..ToyCorpusSpec::default()
        };
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        let files_a = gen_toy(&spec, &out_a).unwrap();
        let files_b = gen_toy(&spec, &out_b).unwrap();
        for (a, b) in files_a.iter().zip(&files_b) {
            assert!(a.exists(), "{} missing", a.display());
            assert_eq!(
                file_checksum(a).unwrap(),
                file_checksum(b).unwrap(),
                "{} differs between identical-seed generations",
                a.display()
            );
        }
        // Second generation into the same directory is skipped.
        gen_toy(&spec, &out_a).unwrap();
        let manifest = load_manifest(&out_a.join("manifest.json")).unwrap();
        assert_eq!(manifest.stages.len(), 2);
        assert_eq!(manifest.stages[1].status, StageStatus::Skipped);
    }

    #[test]
    fn micro_pipeline_runs_resumes_and_records_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let config = micro_config(&dir.path().join("run"));

        let first = run_pipeline(&config).unwrap();
        assert_eq!(first.stages.len(), 7);
        assert!(first.stages.iter().all(|s| !s.skipped));
        assert!(first.report.n_examples > 0);

        // Second run resumes every stage and reproduces the report.
        let second = run_pipeline(&config).unwrap();
        assert!(second.stages.iter().all(|s| s.skipped));
        assert_eq!(first.report, second.report);

        // Every file in the output directory is reachable from the
        // manifest (manifest itself excluded).
        let manifest = load_manifest(&first.manifest_path).unwrap();
        let mut recorded: std::collections::BTreeSet<PathBuf> = manifest
            .stages
            .iter()
            .flat_map(|s| s.outputs.keys())
            .map(|k| config.out_dir.join(k))
            .collect();
        recorded.insert(first.manifest_path.clone());
        let mut on_disk = Vec::new();
        fn walk(dir: &Path, acc: &mut Vec<PathBuf>) {
            for entry in fs::read_dir(dir).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    walk(&p, acc);
                } else {
                    acc.push(p);
                }
            }
        }
        walk(&config.out_dir, &mut on_disk);
        for file in on_disk {
            assert!(
                recorded.contains(&file),
                "orphan artifact {}",
                file.display()
            );
        }

        // Editing a fine-tune knob re-runs fine-tune (and transfer, whose
        // input weights changed) but leaves every earlier stage alone.
        let mut edited = config.clone();
        edited.smlm.lambda_sta = 0.5;
        let third = run_pipeline(&edited).unwrap();
        let reran: Vec<&str> = third
            .stages
            .iter()
            .filter(|s| !s.skipped)
            .map(|s| s.name.as_str())
            .collect();
        assert!(reran.contains(&"finetune"), "reran: {reran:?}");
        assert!(reran.contains(&"transfer"), "reran: {reran:?}");
        for early in ["corpus", "train-attr", "mask", "train-smlm"] {
            assert!(
                !reran.contains(&early),
                "{early} should be resumable: {reran:?}"
            );
        }
    }
}
