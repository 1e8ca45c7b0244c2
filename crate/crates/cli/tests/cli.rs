use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
schema = 1
# a small grid so the tests stay quick
x_min = -8
x_max = 8
y_min = -8
y_max = 8
d = 8
heads = 2
v = 12
k = 4
n_d = 1
epochs = 2
batch_size = 2
";

fn bevground(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bevground"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), stdout(&o), stderr(&o));
    o
}

#[test]
fn gen_rejects_zero_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path(), "d.jsonl");
    let o = bevground(&["gen", "--count", "0", "--out", &out]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("count must be positive"));
    assert!(!Path::new(&out).exists());
}

#[test]
fn gen_is_byte_identical_and_reports_distractors() {
    let dir = tempfile::tempdir().unwrap();
    let a = path(dir.path(), "a.jsonl");
    let b = path(dir.path(), "b.jsonl");
    let oa = ok(bevground(&["gen", "--seed", "7", "--count", "12", "--difficulty", "ambiguous", "--out", &a]));
    ok(bevground(&["gen", "--seed", "7", "--count", "12", "--difficulty", "ambiguous", "--out", &b]));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let summary = stdout(&oa);
    assert!(summary.contains("wrote 12 scenarios"), "{summary}");
    let line = summary
        .lines()
        .find(|l| l.starts_with("look-alike distractors"))
        .expect("distractor line");
    let min: usize = line.split("min ").nth(1).unwrap().split(' ').next().unwrap().parse().unwrap();
    assert!(min >= 2, "{line}");

    let easy = ok(bevground(&["gen", "--count", "4", "--difficulty", "easy", "--out", &a]));
    assert!(stdout(&easy).contains("wrote 4 scenarios"));
}

#[test]
fn unknown_key_fails_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path(), "d.jsonl");
    let o = bevground(&["gen", "--count", "2", "--out", &out, "--set", "bogus=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bogus"));
    assert!(!Path::new(&out).exists());

    let o = bevground(&["gen", "--count", "2", "--out", &out, "--set", "d"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_errors_name_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = path(dir.path(), "bad.cfg");
    std::fs::write(&cfg, "seed = 1\nd = 8\nvoxel_x = wide\n").unwrap();
    let o = bevground(&["--config", &cfg, "gen", "--count", "2", "--out", &path(dir.path(), "d.jsonl")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(&format!("{cfg}:3")), "{}", stderr(&o));

    let o = bevground(&["--config", &path(dir.path(), "missing.cfg"), "gradcheck"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path(), "no/such/dir/d.jsonl");
    let o = bevground(&["gen", "--count", "2", "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_subcommand_is_usage() {
    assert_eq!(bevground(&[]).status.code(), Some(1));
    assert_eq!(bevground(&["gen"]).status.code(), Some(1));
}

#[test]
fn help_lists_flags_and_both_presets() {
    for sub in ["gen", "train", "eval", "label", "ablate", "gradcheck"] {
        let o = ok(bevground(&[sub, "--help"]));
        let text = stdout(&o);
        for flag in ["--preset", "--config", "--set"] {
            assert!(text.contains(flag), "{sub} help lacks {flag}");
        }
        assert!(text.contains("desk default | paper preset"), "{sub}");
        assert!(text.contains("voxel_x"), "{sub}");
    }
    let text = stdout(&ok(bevground(&["ablate", "--help"])));
    assert!(text.contains("--train-data") && text.contains("--test-data") && text.contains("[default: 3]"));
    let text = stdout(&ok(bevground(&["label", "--help"])));
    assert!(text.contains("--tau"));
}

#[test]
fn train_eval_label_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = path(dir.path(), "small.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let data = path(dir.path(), "data.jsonl");
    let ck_a = path(dir.path(), "a.ckpt");
    let ck_b = path(dir.path(), "b.ckpt");
    let curve = path(dir.path(), "curve.csv");
    ok(bevground(&["--config", &cfg, "gen", "--seed", "3", "--count", "4", "--out", &data]));
    ok(bevground(&["--config", &cfg, "train", "--data", &data, "--out-checkpoint", &ck_a, "--curve", &curve]));
    ok(bevground(&["--config", &cfg, "train", "--data", &data, "--out-checkpoint", &ck_b]));
    assert_eq!(std::fs::read(&ck_a).unwrap(), std::fs::read(&ck_b).unwrap());
    let rows = std::fs::read_to_string(&curve).unwrap();
    assert_eq!(rows.lines().count(), 1 + 2 * 2);
    assert!(rows.starts_with("step,epoch,lr,hm,qp,cls,reg,total"));

    let first = ok(bevground(&["eval", "--data", &data, "--checkpoint", &ck_a]));
    let second = ok(bevground(&["eval", "--data", &data, "--checkpoint", &ck_b]));
    assert_eq!(first.stdout, second.stdout);
    let table = stdout(&first);
    let overall = table.lines().find(|l| l.starts_with("overall")).expect("overall row");
    let cells: Vec<f64> = overall.split_whitespace().skip(2).map(|c| c.parse().unwrap()).collect();
    assert_eq!(cells.len(), 4);
    assert!(cells[1] <= cells[0] && cells[3] <= cells[2]);

    let jsonl = stdout(&ok(bevground(&["eval", "--data", &data, "--checkpoint", &ck_a, "--format", "jsonl"])));
    let head: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    assert_eq!(head["scope"], "overall");
    assert_eq!(head["count"], 4);

    let labels = stdout(&ok(bevground(&["label", "--data", &data, "--checkpoint", &ck_a, "--tau", "0"])));
    assert_eq!(labels.lines().count(), 4);
    for line in labels.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let queries = v["queries"].as_array().unwrap();
        assert_eq!(queries.len(), 4);
        assert!(queries.iter().all(|q| q["object"].is_null() && q["target"] == false));
        assert_eq!(v["referential"].as_array().unwrap().len(), 0);
    }
    let wide = stdout(&ok(bevground(&["label", "--data", &data, "--checkpoint", &ck_a, "--tau", "100"])));
    for line in wide.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["queries"].as_array().unwrap().iter().all(|q| !q["object"].is_null()));
    }

    let o = bevground(&["eval", "--data", &data, "--checkpoint", &ck_a, "--set", "d=16"]);
    assert_eq!(o.status.code(), Some(1));
    let o = bevground(&["label", "--data", &data, "--checkpoint", &ck_a, "--tau", "-1"]);
    assert_eq!(o.status.code(), Some(1));
    let o = bevground(&["eval", "--data", &path(dir.path(), "absent.jsonl"), "--checkpoint", &ck_a]);
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(&ck_b, "{not json").unwrap();
    let o = bevground(&["eval", "--data", &data, "--checkpoint", &ck_b]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_numeric() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = path(dir.path(), "small.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let data = path(dir.path(), "data.jsonl");
    ok(bevground(&["--config", &cfg, "gen", "--count", "2", "--difficulty", "easy", "--out", &data]));
    let o = bevground(&[
        "--config", &cfg, "--set", "lr_max=1e300", "--set", "weight_decay=0", "--set", "epochs=20",
        "train", "--data", &data, "--out-checkpoint", &path(dir.path(), "c.ckpt"),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged at step"));
}

#[test]
fn ablate_prints_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = path(dir.path(), "small.cfg");
    std::fs::write(&cfg, format!("{SMALL}epochs = 1\n")).unwrap();
    let train = path(dir.path(), "train.jsonl");
    let test = path(dir.path(), "test.jsonl");
    ok(bevground(&["--config", &cfg, "gen", "--seed", "1", "--count", "4", "--out", &train]));
    ok(bevground(&["--config", &cfg, "gen", "--seed", "2", "--count", "2", "--out", &test]));
    let o = ok(bevground(&["--config", &cfg, "ablate", "--train-data", &train, "--test-data", &test, "--seeds", "3"]));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 6, "{text}");
    for (line, label) in lines[1..5].iter().zip(["full", "w/o OFS", "w/o DiSCo", "w/o both"]) {
        assert!(line.starts_with(label), "{line}");
        let cols: Vec<&str> = line.split_whitespace().collect();
        assert!(cols[cols.len() - 2].parse::<f64>().is_ok() && cols[cols.len() - 1].parse::<f64>().is_ok());
    }
    assert!(lines[5].contains("0, 1, 2"));
    assert_eq!(stderr(&o).lines().filter(|l| l.contains("seed")).count(), 12);
}

#[test]
fn gradcheck_subset_passes() {
    let o = ok(bevground(&["gradcheck", "--max-coords", "3"]));
    let text = stdout(&o);
    assert!(text.contains("0 failed"), "{text}");
    assert!(text.contains("total_loss/pillar"));
}
