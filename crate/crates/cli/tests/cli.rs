//! End-to-end tests of the `smlm` binary: exit codes, artifact layout,
//! and the standalone subcommand contracts.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn smlm(dir: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_smlm"));
    // Ambient overrides must not leak into test runs.
    for (key, _) in std::env::vars() {
        if key.starts_with("SMLM_") {
            cmd.env_remove(key);
        }
    }
    cmd.current_dir(dir)
        .env("RUST_LOG", "error")
        .args(args)
        .output()
        .expect("binary launches")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_micro_config(dir: &Path) {
    fs::write(
        dir.join("micro.toml"),
        r#"
            seed = 11
            out_dir = "run"

            [data.toy]
            train_per_label = 16
            dev_per_label = 6
            test_per_label = 6

            [attribution.classifier]
            embed_dim = 24
            hidden_dim = 24
            epochs = 2

            [eval.classifier]
            embed_dim = 24
            hidden_dim = 24
            epochs = 2

            [smlm]
            model_dim = 32
            n_layers = 1
            n_heads = 4
            ff_dim = 64
            bootstrap_epochs = 2
        "#,
    )
    .unwrap();
}

#[test]
fn gen_toy_is_deterministic_and_names_missing_lexicon_keys() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "gen-toy",
        "--train-per-label",
        "4",
        "--dev-per-label",
        "2",
        "--test-per-label",
        "2",
    ];

    let a = smlm(dir.path(), &[&args[..], &["--out", "a"]].concat());
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    for name in [
        "train.tsv",
        "dev.tsv",
        "test.tsv",
        "labels.json",
        "planted.json",
        "references.tsv",
        "vocab.txt",
        "manifest.json",
    ] {
        assert!(dir.path().join("a").join(name).exists(), "missing {name}");
    }

    // Same seed, different directory: byte-identical corpus files.
    let b = smlm(dir.path(), &[&args[..], &["--out", "b"]].concat());
    assert_eq!(code(&b), 0, "{}", stderr(&b));
    for name in ["train.tsv", "dev.tsv", "test.tsv", "references.tsv", "vocab.txt"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(name)).unwrap(),
            fs::read(dir.path().join("b").join(name)).unwrap(),
            "{name} differs between same-seed generations"
        );
    }

    // A label with no lexicon entry is a usage error that names the key.
    fs::write(
        dir.path().join("bad.toml"),
        "labels = [\"negative\", \"positive\"]\n[lexicons]\nnegative = [\"bad\"]\n",
    )
    .unwrap();
    let c = smlm(
        dir.path(),
        &["gen-toy", "--out", "c", "--spec", "bad.toml"],
    );
    assert_eq!(code(&c), 1);
    assert!(
        stderr(&c).contains("positive"),
        "error should name the missing key: {}",
        stderr(&c)
    );
}

#[test]
fn exit_codes_split_usage_errors_from_runtime_failures() {
    let dir = tempfile::tempdir().unwrap();

    let help = smlm(dir.path(), &["--help"]);
    assert_eq!(code(&help), 0);
    assert!(stdout(&help).contains("SMLM_"), "help documents env overrides");
    assert_eq!(code(&smlm(dir.path(), &["--version"])), 0);

    assert_eq!(code(&smlm(dir.path(), &["no-such-command"])), 1);
    assert_eq!(
        code(&smlm(dir.path(), &["pipeline", "-c", "nope.toml"])),
        1,
        "missing config file is a usage error"
    );

    fs::write(dir.path().join("bad.toml"), "seed = \"x\"\n").unwrap();
    assert_eq!(code(&smlm(dir.path(), &["pipeline", "-c", "bad.toml"])), 1);

    fs::write(
        dir.path().join("unknown_key.toml"),
        "[smlm]\nmodel_dmi = 64\n",
    )
    .unwrap();
    let unknown = smlm(dir.path(), &["pipeline", "-c", "unknown_key.toml"]);
    assert_eq!(code(&unknown), 1);
    assert!(stderr(&unknown).contains("model_dmi"), "{}", stderr(&unknown));

    // Tampering with a recorded artifact is a runtime failure that names
    // the file.
    let gen = smlm(
        dir.path(),
        &[
            "gen-toy", "--out", "g", "--train-per-label", "4",
            "--dev-per-label", "2", "--test-per-label", "2",
        ],
    );
    assert_eq!(code(&gen), 0, "{}", stderr(&gen));
    fs::write(dir.path().join("g").join("train.tsv"), "tampered\n").unwrap();
    let again = smlm(
        dir.path(),
        &[
            "gen-toy", "--out", "g", "--train-per-label", "4",
            "--dev-per-label", "2", "--test-per-label", "2",
        ],
    );
    assert_eq!(code(&again), 2);
    assert!(stderr(&again).contains("train.tsv"), "{}", stderr(&again));

    // A held lock on the output directory fails fast as a runtime error.
    write_micro_config(dir.path());
    fs::create_dir_all(dir.path().join("run")).unwrap();
    fs::write(dir.path().join("run").join(".lock"), "held").unwrap();
    let locked = smlm(dir.path(), &["train-attr", "-c", "micro.toml"]);
    assert_eq!(code(&locked), 2);
    assert!(stderr(&locked).contains(".lock"), "{}", stderr(&locked));
}

#[test]
fn pipeline_then_standalone_transfer_keeps_lines_aligned() {
    let dir = tempfile::tempdir().unwrap();
    write_micro_config(dir.path());

    let run = smlm(dir.path(), &["pipeline", "-c", "micro.toml"]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let report = stdout(&run);
    assert!(report.contains("TST%"), "report printed: {report}");
    assert!(report.contains("manifest:"));

    // Resumed run prints the same report without retraining.
    let rerun = smlm(dir.path(), &["pipeline", "-c", "micro.toml"]);
    assert_eq!(code(&rerun), 0, "{}", stderr(&rerun));
    assert!(stdout(&rerun).contains("resumed"));
    let tail = |s: &str| {
        s.lines()
            .skip_while(|l| !l.starts_with("examples"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(tail(&report), tail(&stdout(&rerun)));

    let run_dir = dir.path().join("run");
    let model = run_dir.join("smlm").join("finetuned");
    let vocab = run_dir.join("vocab.txt");
    let labels = run_dir.join("corpus").join("labels.json");
    let masked_test = run_dir.join("masked").join("test.tsv");
    let model_s = model.to_str().unwrap();
    let vocab_s = vocab.to_str().unwrap();
    let labels_s = labels.to_str().unwrap();
    let masked_s = masked_test.to_str().unwrap();

    // One output line per input line, in order.
    let out = smlm(
        dir.path(),
        &[
            "transfer", "--model", model_s, "--vocab", vocab_s, "--labels", labels_s,
            "--input", masked_s, "--dst", "positive",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let n_inputs = fs::read_to_string(&masked_test)
        .unwrap()
        .lines()
        .filter(|l| !l.is_empty())
        .count();
    let lines: Vec<String> = stdout(&out).lines().map(str::to_string).collect();
    assert_eq!(lines.len(), n_inputs);
    assert!(lines.iter().all(|l| l.starts_with("positive\t")));

    // Empty input produces an empty output file and succeeds.
    fs::write(dir.path().join("empty.tsv"), "").unwrap();
    let empty = smlm(
        dir.path(),
        &[
            "transfer", "--model", model_s, "--vocab", vocab_s, "--labels", labels_s,
            "--input", "empty.tsv", "--dst", "positive", "--out", "empty_out.tsv",
        ],
    );
    assert_eq!(code(&empty), 0, "{}", stderr(&empty));
    assert_eq!(fs::read(dir.path().join("empty_out.tsv")).unwrap(), b"");

    // Zero masked positions with dst = src copies the input through.
    let source_line = fs::read_to_string(run_dir.join("corpus").join("test.tsv"))
        .unwrap()
        .lines()
        .find(|l| l.starts_with("positive\t"))
        .unwrap()
        .to_string();
    fs::write(dir.path().join("nomask.tsv"), format!("{source_line}\t\n")).unwrap();
    let identity = smlm(
        dir.path(),
        &[
            "transfer", "--model", model_s, "--vocab", vocab_s, "--labels", labels_s,
            "--input", "nomask.tsv", "--dst", "positive",
        ],
    );
    assert_eq!(code(&identity), 0, "{}", stderr(&identity));
    assert_eq!(stdout(&identity).trim_end(), source_line);

    // Unknown destination label is a usage error; missing checkpoint is a
    // runtime failure.
    let bad_label = smlm(
        dir.path(),
        &[
            "transfer", "--model", model_s, "--vocab", vocab_s, "--labels", labels_s,
            "--input", masked_s, "--dst", "sideways",
        ],
    );
    assert_eq!(code(&bad_label), 1);
    assert!(stderr(&bad_label).contains("sideways"));
    let bad_model = smlm(
        dir.path(),
        &[
            "transfer", "--model", "no/model/here", "--vocab", vocab_s, "--labels", labels_s,
            "--input", masked_s, "--dst", "positive",
        ],
    );
    assert_eq!(code(&bad_model), 2);
}

#[test]
fn compare_attr_emits_exactly_the_expected_rows() {
    let dir = tempfile::tempdir().unwrap();
    write_micro_config(dir.path());

    let out = smlm(dir.path(), &["compare-attr", "-c", "micro.toml"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let rows: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.path().join("run").join("compare").join("report.json")).unwrap(),
    )
    .unwrap();
    let methods: Vec<&str> = rows
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["method"].as_str().unwrap())
        .collect();
    assert_eq!(methods, ["va", "ea", "vg", "gxx", "ig", "none"]);

    // The unmasked baseline row masks nothing and leaves text identical.
    let none = &rows.as_array().unwrap()[5]["quality"];
    assert_eq!(none["mask_rate"].as_f64().unwrap(), 0.0);
    assert_eq!(none["s_bleu_masked"].as_f64().unwrap(), 100.0);

    for method in ["va", "ea", "vg", "gxx", "ig", "none"] {
        assert!(stdout(&out).contains(method), "table row {method} printed");
    }
}
