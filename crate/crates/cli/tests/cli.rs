use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use cedual::checkpoint::Checkpoint;
use cedual::data::corpus::{write_jsonl_records, DialogueRecord};
use cedual::data::labels::LabelSet;
use cedual::data::synth::synth_corpus;
use cedual::eval::evaluate_corpus;
use cedual::metrics::MetricSet;
use cedual::model::DecodeStrategy;
use serde_json::Value;
use tempfile::TempDir;

const TOY: &str = r#"
corpus = "synthetic"
synth_train_size = 48
synth_valid_size = 16
synth_emotions = 4
synth_vocab_size = 32
d_model = 16
d_emb = 16
heads = 2
d_ff = 32
layers_enc = 1
layers_dec_stage = 1
dropout = 0.0
max_len = 16
lr = 0.003
warmup_steps = 0
batch_size = 8
max_steps = 24
eval_every = 8
patience = 3
"#;

fn cedual(args: &[&str], env_seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cedual"));
    cmd.args(args).env_remove("CEDUAL_SEED");
    if let Some(s) = env_seed {
        cmd.env("CEDUAL_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn with_stdin(args: &[&str], input: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_cedual"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("binary runs");
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Toy {
    dir: TempDir,
}

impl Toy {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("toy.cfg"), TOY).unwrap();
        Self { dir }
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("toy.cfg")
    }

    fn join(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let out = self.join(out);
        let config = self.config();
        let mut args = vec!["train", "--config", path(&config), "--out", path(&out)];
        args.extend_from_slice(extra);
        cedual(&args, None)
    }

    /// A held-out synthetic corpus with the toy layout, as JSONL.
    fn heldout(&self) -> PathBuf {
        let labels = LabelSet::first(4).unwrap();
        let records: Vec<DialogueRecord> = synth_corpus(99, 12, 4, 32)
            .unwrap()
            .iter()
            .map(|d| DialogueRecord::from_example(&d.example, &labels))
            .collect();
        let p = self.join("heldout.jsonl");
        write_jsonl_records(&p, &records).unwrap();
        p
    }
}

fn json_lines(s: &str) -> Vec<Value> {
    s.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn train_writes_checkpoints_and_curves() {
    let toy = Toy::new();
    let o = toy.train("run", &["--variant", "fcte"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = &json_lines(&stdout(&o))[0];
    assert_eq!(summary["variant"], "fcte");
    assert_eq!(summary["steps"], 24);
    for f in ["last.ckpt", "best.ckpt", "config.toml", "curves.jsonl", "evals.jsonl"] {
        assert!(toy.join("run").join(f).exists(), "{f}");
    }
    let curves = fs::read_to_string(toy.join("run/curves.jsonl")).unwrap();
    let curves = json_lines(&curves);
    assert_eq!(curves.len(), 24);
    assert!(curves.iter().all(|r| r["l_total"].is_f64()));
    let evals = fs::read_to_string(toy.join("run/evals.jsonl")).unwrap();
    assert_eq!(json_lines(&evals).len(), 3);
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let toy = Toy::new();
    for out in ["a", "b"] {
        let o = toy.train(out, &["--seed", "7"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = fs::read(toy.join("a/last.ckpt")).unwrap();
    let b = fs::read(toy.join("b/last.ckpt")).unwrap();
    assert_eq!(a, b);
    let o = toy.train("c", &["--seed", "8"]);
    assert!(o.status.success());
    assert_ne!(a, fs::read(toy.join("c/last.ckpt")).unwrap());
}

#[test]
fn seed_falls_back_to_the_environment() {
    let toy = Toy::new();
    let config = toy.config();
    let out = toy.join("env");
    let o = cedual(&["train", "--config", path(&config), "--out", path(&out)], Some("11"));
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(Checkpoint::load(&out.join("last.ckpt")).unwrap().seed, 11);
    let o = cedual(
        &["train", "--config", path(&config), "--out", path(&out), "--seed", "12"],
        Some("11"),
    );
    assert!(o.status.success());
    let ckpt = Checkpoint::load(&out.join("last.ckpt")).unwrap();
    assert_eq!(ckpt.seed, 12);
    assert!(ckpt.run_config.contains("seed = 12"), "{}", ckpt.run_config);
}

#[test]
fn config_errors_exit_2_naming_the_field() {
    let toy = Toy::new();
    let o = toy.train("x", &["--set", "corpus=\"jsonl\""]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train_path"), "{}", stderr(&o));

    let o = toy.train("x", &["--set", "corpus=\"jsonl\"", "--set", "train_path=/no/such/file.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/file.jsonl"), "{}", stderr(&o));

    let o = toy.train("x", &["--set", "warmup=5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("warmup"), "{}", stderr(&o));

    let o = cedual(&["train", "--bogus-flag"], None);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let toy = Toy::new();
    let o = toy.train("boom", &["--set", "lr=1e300"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
    assert!(toy.join("boom/last.ckpt").exists());
}

#[test]
fn eval_matches_in_process_evaluation_exactly() {
    let toy = Toy::new();
    assert!(toy.train("run", &[]).status.success());
    let ckpt_path = toy.join("run/best.ckpt");
    let corpus = toy.heldout();
    let o = cedual(&["eval", "--checkpoint", path(&ckpt_path), "--corpus", path(&corpus)], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = &json_lines(&stdout(&o))[0];

    let ckpt = Checkpoint::load(&ckpt_path).unwrap();
    let labels = LabelSet::first(4).unwrap();
    let examples: Vec<_> = cedual::data::load_corpus(&corpus, cedual::data::CorpusFormat::Jsonl, &labels)
        .unwrap()
        .iter()
        .map(|ex| cedual::data::encode_example(ex, &ckpt.vocab, 16).unwrap())
        .collect();
    let expected = evaluate_corpus(&ckpt.model, &examples, MetricSet::ALL, DecodeStrategy::Greedy, 1, ckpt.step).unwrap();
    for (key, value) in [("acc", expected.acc), ("bleu", expected.bleu), ("ppl", expected.ppl)] {
        assert_eq!(report[key].as_f64(), value, "{key}");
    }
    assert_eq!(report["step"], ckpt.step);

    let o = cedual(
        &["eval", "--checkpoint", path(&ckpt_path), "--corpus", path(&corpus), "--metrics", "bleu", "--shards", "3"],
        None,
    );
    assert!(o.status.success());
    let report = &json_lines(&stdout(&o))[0];
    let keys: Vec<&String> = report.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["bleu", "step", "variant"]);
    assert_eq!(report["bleu"].as_f64(), expected.bleu);
}

#[test]
fn ablation_over_four_checkpoints() {
    let toy = Toy::new();
    let mut ckpts = Vec::new();
    for v in ["emotion", "fetc", "content", "fcte"] {
        let o = toy.train(v, &["--variant", v, "--set", "max_steps=8"]);
        assert!(o.status.success(), "{}", stderr(&o));
        ckpts.push(toy.join(v).join("last.ckpt"));
    }
    let corpus = toy.heldout();
    let tsv = toy.join("ablation.tsv");
    let mut args = vec!["eval", "--ablation", "--corpus", path(&corpus), "--tsv", path(&tsv)];
    for c in &ckpts {
        args.extend(["--checkpoint", path(c)]);
    }
    let o = cedual(&args, None);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = json_lines(&stdout(&o));
    let variants: Vec<&str> = rows.iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(variants, ["fcte", "fetc", "content", "emotion"]);
    let table = fs::read_to_string(&tsv).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert!(table.starts_with("variant\tstep\tacc\tbleu\tppl\n"));

    // Two checkpoints of one variant cannot form the table.
    let mut args = vec!["eval", "--ablation", "--corpus", path(&corpus)];
    for c in [&ckpts[0], &ckpts[0], &ckpts[1], &ckpts[2]] {
        args.extend(["--checkpoint", path(c)]);
    }
    let o = cedual(&args, None);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn eval_rejects_a_corpus_the_checkpoint_cannot_read() {
    let toy = Toy::new();
    assert!(toy.train("run", &["--set", "max_steps=2"]).status.success());
    let corpus = toy.join("foreign.jsonl");
    // "terrified" is a valid label of the full set but not of the toy's four.
    fs::write(
        &corpus,
        "{\"utterances\":[{\"role\":\"speaker\",\"text\":\"w1 w2\"}],\"response\":\"ok\",\"emotion\":\"terrified\"}\n",
    )
    .unwrap();
    let ckpt = toy.join("run/last.ckpt");
    let o = cedual(&["eval", "--checkpoint", path(&ckpt), "--corpus", path(&corpus)], None);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let garbage = toy.join("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let o = cedual(&["eval", "--checkpoint", path(&garbage), "--corpus", path(&toy.heldout())], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("checkpoint"), "{}", stderr(&o));
}

#[test]
fn generate_handles_empty_repeated_and_malformed_input() {
    let toy = Toy::new();
    assert!(toy.train("run", &[]).status.success());
    let ckpt = toy.join("run/best.ckpt");

    let empty = toy.join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = toy.join("empty.out");
    let o = cedual(&["generate", "--checkpoint", path(&ckpt), "--input", path(&empty), "--output", path(&out)], None);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&out).unwrap(), "");

    let input = toy.heldout();
    let mut outputs = Vec::new();
    for name in ["g1.out", "g2.out"] {
        let out = toy.join(name);
        let o = cedual(&["generate", "--checkpoint", path(&ckpt), "--input", path(&input), "--output", path(&out)], None);
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push(fs::read_to_string(&out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0].lines().count(), 12);

    let mixed = toy.join("mixed.jsonl");
    let good = fs::read_to_string(&input).unwrap();
    let first = good.lines().next().unwrap();
    fs::write(
        &mixed,
        format!("{first}\nnot json\n{{\"utterances\":[{{\"role\":\"listener\",\"text\":\"hi\"}}]}}\n{first}\n"),
    )
    .unwrap();
    let out = toy.join("mixed.out");
    let o = cedual(&["generate", "--checkpoint", path(&ckpt), "--input", path(&mixed), "--output", path(&out)], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("skipping line 2"), "{}", stderr(&o));
    assert!(stderr(&o).contains("skipping line 3"), "{}", stderr(&o));
    let written = json_lines(&fs::read_to_string(&out).unwrap());
    let lines: Vec<u64> = written.iter().map(|r| r["line"].as_u64().unwrap()).collect();
    assert_eq!(lines, [1, 4]);
    assert_eq!(written[0]["response"], written[1]["response"]);
}

#[test]
fn overfit_model_reproduces_its_training_responses() {
    let toy = Toy::new();
    let o = toy.train(
        "overfit",
        &[
            "--set", "synth_train_size=4",
            "--set", "synth_valid_size=0",
            "--set", "batch_size=4",
            "--set", "max_steps=300",
            "--set", "eval_every=300",
            "--set", "lr=0.005",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let labels = LabelSet::first(4).unwrap();
    let corpus: Vec<DialogueRecord> = synth_corpus(0, 4, 4, 32)
        .unwrap()
        .iter()
        .map(|d| DialogueRecord::from_example(&d.example, &labels))
        .collect();
    let input = toy.join("train.jsonl");
    write_jsonl_records(&input, &corpus).unwrap();
    let out = toy.join("overfit.out");
    let ckpt = toy.join("overfit/last.ckpt");
    let o = cedual(&["generate", "--checkpoint", path(&ckpt), "--input", path(&input), "--output", path(&out)], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let written = json_lines(&fs::read_to_string(&out).unwrap());
    for (r, gold) in written.iter().zip(&corpus) {
        assert_eq!(r["response"].as_str(), gold.response.as_deref());
        assert_eq!(r["emotion"].as_str(), Some(gold.emotion.as_str()));
    }
}

#[test]
fn chat_session_over_stdin() {
    let toy = Toy::new();
    let o = toy.train(
        "run",
        &["--set", "max_steps=4", "--set", "synth_emotions=8", "--set", "synth_vocab_size=48"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = toy.join("run/last.ckpt");
    let args = ["chat", "--checkpoint", path(&ckpt)];

    let o = with_stdin(&args, ":quit\n");
    assert!(o.status.success());
    assert_eq!(stdout(&o), "");

    let o = with_stdin(&args, "");
    assert!(o.status.success());

    let o = with_stdin(&args, "w1 topic2 emo1\n:history\nw3 topic0\n:history\n:emotion\n:reset\n:history\n:quit\n");
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    // reply, 2 history rows, reply, 4 history rows, 5 emotion rows.
    assert_eq!(lines.len(), 1 + 2 + 1 + 4 + 5, "{out}");
    assert!(lines[1].starts_with("speaker\tw1 topic2 emo1"));
    assert!(lines[2].starts_with("listener\t"));
    let probs: f64 = lines[8..]
        .iter()
        .map(|l| l.split('\t').nth(1).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!(probs <= 1.0 + 1e-12);
}

#[test]
fn convert_csv_fixture_to_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let input = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/ed_sample.csv");
    let output = dir.path().join("ed.jsonl");
    let o = cedual(
        &["convert", "--from", "csv-ed", "--to", "jsonl", "--input", path(&input), "--output", path(&output)],
        None,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(json_lines(&stdout(&o))[0]["dialogues"], 5);
    let examples = cedual::data::load_corpus(&output, cedual::data::CorpusFormat::Jsonl, &LabelSet::full()).unwrap();
    assert_eq!(examples.len(), 8);
    assert!(fs::read_to_string(&output).unwrap().contains(", "));

    let o = cedual(
        &["convert", "--from", "jsonl", "--to", "csv-ed", "--input", path(&output), "--output", path(&input)],
        None,
    );
    assert_eq!(o.status.code(), Some(2));
}
