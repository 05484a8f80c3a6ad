use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn flipaudit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flipaudit"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const JUDGE: &str = r#"
[[endpoints]]
kind = "synthetic"
name = "judge-a"
seed = 5
noise_rate = 0.1
"#;

fn only_run_dir(root: &Path) -> PathBuf {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.pop().unwrap()
}

#[test]
fn generate_run_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let o = flipaudit(dir, &["generate", "--out", "corpus.jsonl", "--domains", "lending,hiring", "--n-per-area", "5", "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("wrote 30 pairs"));

    fs::write(
        dir.join("run.toml"),
        format!("mode = \"freeform\"\ncorpus = \"corpus.jsonl\"\noutput_dir = \"runs\"\nn_per_area = 5\ndomains = [\"lending\", \"hiring\"]\n{JUDGE}"),
    )
    .unwrap();
    let o = flipaudit(dir, &["run", "run.toml"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let run = only_run_dir(&dir.join("runs"));
    let name = run.file_name().unwrap().to_str().unwrap().to_owned();
    assert!(name.starts_with("freeform-"), "{name}");
    for f in ["manifest.json", "records.jsonl", "cell_stats.csv", "cell_stats.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }

    // same config and corpus: same directory and the same records
    let first = fs::read_to_string(run.join("records.jsonl")).unwrap();
    let o = flipaudit(dir, &["run", "run.toml"]);
    assert!(o.status.success());
    assert_eq!(only_run_dir(&dir.join("runs")), run);
    assert_eq!(fs::read_to_string(run.join("records.jsonl")).unwrap(), first);

    let o = flipaudit(dir, &["report", run.to_str().unwrap(), "--out", "rep", "--verify-report"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["model_by_bias.csv", "domain_by_bias.csv", "report.json", "report.txt"] {
        assert!(dir.join("rep").join(f).is_file(), "missing {f}");
    }
    let table = fs::read_to_string(dir.join("rep/model_by_bias.csv")).unwrap();
    assert!(table.contains("judge-a"));
}

#[test]
fn enumerate_lending_rubric() {
    let tmp = tempfile::tempdir().unwrap();
    let o = flipaudit(tmp.path(), &["enumerate-rubric", "--domain", "lending"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("Approve") && text.contains("Deny"));
}

#[test]
fn invalid_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("corpus.jsonl"), "").unwrap();
    fs::write(
        tmp.path().join("bad.toml"),
        "mode = \"freeform\"\ncorpus = \"corpus.jsonl\"\noutput_dir = \"runs\"\nfdr_q = 2.0\n",
    )
    .unwrap();
    assert_eq!(flipaudit(tmp.path(), &["run", "bad.toml"]).status.code(), Some(64));

    fs::write(tmp.path().join("typo.toml"), "mode = \"freeform\"\ncorpus = \"c\"\noutput_dir = \"r\"\nsede = 1\n").unwrap();
    assert_eq!(flipaudit(tmp.path(), &["run", "typo.toml"]).status.code(), Some(64));

    assert_eq!(flipaudit(tmp.path(), &["no-such-command"]).status.code(), Some(64));
    assert_eq!(flipaudit(tmp.path(), &["--help"]).status.code(), Some(0));
}
