mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use joint_parse::dependency::{eisner_decode, ArcScores};
use joint_parse::treebank::{read_bracketed, read_conll};
use joint_parse_cli::oracle::eisner_suite;
use joint_parse_cli::{cmd_train, RunManifest, RunPaths};
use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_joint-parse"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train_tiny(dir: &Path, name: &str, extra: &[(&str, &str)]) -> RunManifest {
    let config = common::tiny_config(dir, 1);
    let mut overrides = vec![("output_dir".to_string(), s(&dir.join(name)).to_string())];
    overrides.extend(extra.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    cmd_train(&config, &overrides).unwrap()
}

#[test]
fn eval_of_gold_against_itself_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let toy = common::data_dir().join("toy");
    let (mrg, conll) = (toy.join("train.mrg"), toy.join("train.conll"));
    let json = tmp.path().join("eval.json");
    let o = run(&[
        "eval",
        "--gold-trees",
        s(&mrg),
        "--pred-trees",
        s(&mrg),
        "--gold-conll",
        s(&conll),
        "--pred-conll",
        s(&conll),
        "--output",
        s(&json),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let header = stdout.lines().find(|l| l.contains("LR")).unwrap();
    let cols: Vec<&str> = header.split_whitespace().collect();
    assert_eq!(cols, ["LR", "LP", "F1", "UAS", "LAS"]);
    let v: Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    for key in ["lr", "lp", "f1", "uas", "las"] {
        assert_eq!(v[key].as_f64(), Some(100.0), "{key}");
    }
}

#[test]
fn eval_of_a_missing_file_exits_2_naming_it() {
    let toy = common::data_dir().join("toy");
    let missing = "/nonexistent/pred.mrg";
    let o = run(&["eval", "--gold-trees", s(&toy.join("train.mrg")), "--pred-trees", missing]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(missing), "{}", stderr(&o));
}

#[test]
fn eval_of_misaligned_files_fails_with_a_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let gold = common::data_dir().join("toy/train.mrg");
    let text = fs::read_to_string(&gold).unwrap();
    let short: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
    let pred = tmp.path().join("short.mrg");
    fs::write(&pred, short).unwrap();
    let o = run(&["eval", "--gold-trees", s(&gold), "--pred-trees", s(&pred)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("32 trees"), "{}", stderr(&o));
}

#[test]
fn golden_pairs_score_as_expected_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = common::golden_cases();
    let gold: String = cases.iter().map(|c| format!("{}\n", c.gold)).collect();
    let pred: String = cases.iter().map(|c| format!("{}\n", c.pred)).collect();
    let (g, p, j) = (tmp.path().join("g"), tmp.path().join("p"), tmp.path().join("j"));
    fs::write(&g, gold).unwrap();
    fs::write(&p, pred).unwrap();
    let o = run(&["eval", "--gold-trees", s(&g), "--pred-trees", s(&p), "--output", s(&j)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&fs::read_to_string(&j).unwrap()).unwrap();
    let (m, gc, pc) = cases.iter().fold((0, 0, 0), |a, c| {
        (a.0 + c.counts.0, a.1 + c.counts.1, a.2 + c.counts.2)
    });
    assert_eq!(v["brackets"]["matched"], m);
    assert_eq!(v["brackets"]["gold"], gc);
    assert_eq!(v["brackets"]["predicted"], pc);
    assert!(v["uas"].is_null());
}

#[test]
fn too_many_shared_layers_is_a_config_error_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    let config = common::tiny_config(tmp.path(), 1);
    let out = tmp.path().join("never");
    let o = run(&["train", "--config", s(&config), "--shared-layers", "3", "--output-dir", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("shared"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn missing_config_exits_2() {
    let o = run(&["train", "--config", "/nonexistent/run.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/run.toml"));
}

#[test]
fn const_mode_manifest_has_no_dependency_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let m = train_tiny(tmp.path(), "const", &[("mode", "const")]);
    assert!(m.metrics.f1.is_some());
    assert!(m.metrics.uas.is_none() && m.metrics.las.is_none());
    let json = fs::read_to_string(RunPaths::new(&tmp.path().join("const")).manifest).unwrap();
    let v: Value = serde_json::from_str(&json).unwrap();
    let metrics = v["metrics"].as_object().unwrap();
    assert!(metrics.contains_key("f1"));
    assert!(!metrics.contains_key("uas") && !metrics.contains_key("las"));
}

#[test]
fn shared_layer_endpoints_both_train() {
    let tmp = tempfile::tempdir().unwrap();
    let none = train_tiny(tmp.path(), "k0", &[("shared_layers", "0")]);
    let all = train_tiny(tmp.path(), "k2", &[("shared_layers", "2")]);
    assert!(none.num_params > all.num_params);
    assert!(none.config.contains("shared_layers = 0"));
    assert!(all.config.contains("shared_layers = 2"));
}

#[test]
fn rerunning_the_recorded_config_reproduces_dev_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let first = train_tiny(tmp.path(), "first", &[]);
    let recorded = RunPaths::new(&tmp.path().join("first")).config;
    assert_eq!(fs::read_to_string(&recorded).unwrap(), first.config);
    let out = tmp.path().join("second");
    let second = cmd_train(&recorded, &[("output_dir".into(), s(&out).into())]).unwrap();
    assert_eq!(first.metrics, second.metrics);
    assert_eq!(first.vocab_sha256, second.vocab_sha256);
    let log = |d: &str| fs::read(RunPaths::new(&tmp.path().join(d)).log).unwrap();
    assert_eq!(log("first"), log("second"));
}

#[test]
fn parse_writes_both_formats_and_handles_edge_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    train_tiny(tmp.path(), "model", &[]);
    let ckpt = RunPaths::new(&tmp.path().join("model")).checkpoint;
    let input = tmp.path().join("in.txt");
    let (trees, conll) = (tmp.path().join("out.mrg"), tmp.path().join("out.conll"));
    fs::write(&input, "dog\nthe cat saw a ( dog ) .\n\nthe/DT man/NN slept/VBD\n").unwrap();
    let o = run(&[
        "parse",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&input),
        "--trees",
        s(&trees),
        "--conll",
        s(&conll),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let t = read_bracketed(&fs::read_to_string(&trees).unwrap()).unwrap();
    let d = read_conll(&fs::read_to_string(&conll).unwrap()).unwrap();
    assert_eq!(t.len(), 3);
    assert_eq!(d.len(), 3);
    assert_eq!(t[0].1.len(), 1);
    assert_eq!(d[0].1.heads, vec![0]);
    assert_eq!(t[1].0.forms().nth(4), Some("-LRB-"));
    assert_eq!(t[2].0.tags().collect::<Vec<_>>(), ["DT", "NN", "VBD"]);
    for ((ts, _), (ds, dt)) in t.iter().zip(&d) {
        assert!(ts.forms().eq(ds.forms()));
        assert!(dt.validate().is_ok() && dt.is_projective());
    }

    fs::write(&input, "").unwrap();
    let o = run(&[
        "parse",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&input),
        "--trees",
        s(&trees),
        "--conll",
        s(&conll),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fs::read_to_string(&trees).unwrap().is_empty());
    assert!(fs::read_to_string(&conll).unwrap().is_empty());
}

#[test]
fn parse_requires_tags_when_the_model_reads_them() {
    let tmp = tempfile::tempdir().unwrap();
    train_tiny(tmp.path(), "pos", &[("use_pos", "true")]);
    let ckpt = RunPaths::new(&tmp.path().join("pos")).checkpoint;
    let input = tmp.path().join("in.txt");
    fs::write(&input, "the/DT dog/NN\nthe dog/NN\n").unwrap();
    let out = tmp.path().join("o");
    let o = run(&[
        "parse",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&input),
        "--trees",
        s(&out),
        "--conll",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn oracle_check_passes_and_guards_its_range() {
    let o = run(&["oracle-check", "--seeds", "5", "--max-n", "4", "--grad-seeds", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 5);
    let o = run(&["oracle-check", "--max-n", "9"]);
    assert_eq!(o.status.code(), Some(2));
}

/// A textbook single-root Eisner over log-probabilities. With `mutate` set,
/// the right-complete split range stops one short.
fn reference_eisner(scores: &ArcScores, mutate: bool) -> Vec<usize> {
    let n = scores.n();
    let lp = scores.log_probs();
    let arc = |d: usize, h: usize| lp.get(d, h);
    let neg = f64::NEG_INFINITY;
    let w = n + 2;
    let idx = |s: usize, t: usize| s * w + t;
    // [dir][s][t]; dir 0 = head at t, dir 1 = head at s
    let mut c = vec![vec![neg; w * w]; 2];
    let mut i = vec![vec![neg; w * w]; 2];
    let mut cb = vec![vec![None; w * w]; 2];
    let mut ib = vec![vec![None; w * w]; 2];
    for s in 1..=n {
        c[0][idx(s, s)] = 0.0;
        c[1][idx(s, s)] = 0.0;
    }
    for len in 1..n {
        for s in 1..=n - len {
            let t = s + len;
            for r in s..t {
                let v = c[1][idx(s, r)] + c[0][idx(r + 1, t)];
                if v + arc(s, t) > i[0][idx(s, t)] {
                    i[0][idx(s, t)] = v + arc(s, t);
                    ib[0][idx(s, t)] = Some(r);
                }
                if v + arc(t, s) > i[1][idx(s, t)] {
                    i[1][idx(s, t)] = v + arc(t, s);
                    ib[1][idx(s, t)] = Some(r);
                }
            }
            for r in s..t {
                let v = c[0][idx(s, r)] + i[0][idx(r, t)];
                if v > c[0][idx(s, t)] {
                    c[0][idx(s, t)] = v;
                    cb[0][idx(s, t)] = Some(r);
                }
            }
            let hi = if mutate { t } else { t + 1 };
            for r in s + 1..hi {
                let v = i[1][idx(s, r)] + c[1][idx(r, t)];
                if v > c[1][idx(s, t)] {
                    c[1][idx(s, t)] = v;
                    cb[1][idx(s, t)] = Some(r);
                }
            }
        }
    }
    let mut heads = vec![0; n];
    fn complete(
        dir: usize,
        s: usize,
        t: usize,
        cb: &[Vec<Option<usize>>],
        ib: &[Vec<Option<usize>>],
        w: usize,
        heads: &mut [usize],
    ) {
        if s == t {
            return;
        }
        let Some(r) = cb[dir][s * w + t] else { return };
        if dir == 0 {
            complete(0, s, r, cb, ib, w, heads);
            incomplete(0, r, t, cb, ib, w, heads);
        } else {
            incomplete(1, s, r, cb, ib, w, heads);
            complete(1, r, t, cb, ib, w, heads);
        }
    }
    fn incomplete(
        dir: usize,
        s: usize,
        t: usize,
        cb: &[Vec<Option<usize>>],
        ib: &[Vec<Option<usize>>],
        w: usize,
        heads: &mut [usize],
    ) {
        if s == t {
            return;
        }
        if dir == 0 {
            heads[s - 1] = t;
        } else {
            heads[t - 1] = s;
        }
        let Some(r) = ib[dir][s * w + t] else { return };
        complete(1, s, r, cb, ib, w, heads);
        complete(0, r + 1, t, cb, ib, w, heads);
    }
    let mut best = (neg, 1);
    for r in 1..=n {
        let v = arc(r, 0) + c[0][idx(1, r)] + c[1][idx(r, n)];
        if v > best.0 {
            best = (v, r);
        }
    }
    let r = best.1;
    complete(0, 1, r, &cb, &ib, w, &mut heads);
    complete(1, r, n, &cb, &ib, w, &mut heads);
    heads[r - 1] = 0;
    heads
}

#[test]
fn eisner_oracle_catches_an_off_by_one() {
    assert!(eisner_suite(50, 6, eisner_decode).passed());
    assert!(eisner_suite(50, 6, |s| reference_eisner(s, false)).passed());
    let mutated = eisner_suite(50, 6, |s| reference_eisner(s, true));
    assert!(!mutated.passed());
    assert!(!mutated.failures.is_empty());
}
