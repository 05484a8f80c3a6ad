use std::time::Duration;

use flipaudit_core::gateway::{DecisionModel, ModelResponse};
use flipaudit_core::report::{build_report, load_run, verify_run};
use flipaudit_core::run::{execute, read_manifest, RunConfig, RunMode, RunStatus, FAILURES_FILE};
use flipaudit_core::vignette::{save_corpus, Provenance, VignettePair};
use flipaudit_core::{BiasType, Domain, Error};

/// Denies swapped prompts of every third case and times out on every fifth.
struct Flaky;

impl DecisionModel for Flaky {
    fn name(&self) -> &str {
        "flaky"
    }

    fn query(&self, prompt: &str) -> flipaudit_core::Result<ModelResponse> {
        let i: usize = prompt
            .split("Case #")
            .nth(1)
            .and_then(|s| s.split_whitespace().next())
            .and_then(|s| s.parse().ok())
            .expect("case number");
        if i % 5 == 0 {
            return Err(Error::Timeout(Duration::from_secs(1)));
        }
        let text = if prompt.contains("unverified") && i % 3 == 0 {
            "(b) Deny\nweak endorsement"
        } else if i % 7 == 0 {
            "I cannot decide this one."
        } else {
            "(a) Approve\nfine"
        };
        Ok(ModelResponse {
            raw_text: text.into(),
            latency: Duration::ZERO,
            cached: false,
            request_fingerprint: format!("flaky-{i}"),
        })
    }
}

fn corpus(n: usize, tag: &str) -> Vec<VignettePair> {
    (1..=n)
        .map(|i| VignettePair {
            id: format!("lending-authority-{i:04}"),
            domain: Domain::Lending,
            bias_type: BiasType::Authority,
            context: format!("Loan {tag}"),
            base_text: format!("Case #{i} applicant. A bank manager vouched for them."),
            swap_text: format!("Case #{i} applicant. An unverified caller vouched for them."),
            decision_prompt: "Decide:".into(),
            options: vec!["Approve".into(), "Deny".into()],
            provenance: Provenance::Template,
        })
        .collect()
}

fn config(dir: &std::path::Path, corpus_file: &str) -> RunConfig {
    let mut cfg = RunConfig::new(RunMode::Freeform, dir.join(corpus_file), dir.join("runs"));
    cfg.domains = vec![Domain::Lending];
    cfg.bias_types = vec![BiasType::Authority];
    cfg.n_per_area = 30;
    cfg
}

#[test]
fn failures_are_counted_apart_from_exclusions() {
    let tmp = tempfile::tempdir().unwrap();
    save_corpus(&tmp.path().join("a.jsonl"), &corpus(30, "a")).unwrap();
    let out = execute(&config(tmp.path(), "a.jsonl"), &[Box::new(Flaky)]).unwrap();

    assert_eq!(out.manifest.status, RunStatus::Partial);
    let cell = &out.manifest.cells[0];
    // cases 5, 10, ..., 30 fail; 7, 14, 21, 28 are unparseable
    assert_eq!(cell.failed, 6);
    assert_eq!(cell.excluded, 4);
    assert_eq!(cell.n, 20);
    // flips at multiples of 3 that neither fail nor are excluded: 3, 6, 9, 12, 18, 24, 27
    assert_eq!(cell.k, 7);
    let failures = std::fs::read_to_string(out.dir.join(FAILURES_FILE)).unwrap();
    // one record per failed pair
    assert_eq!(failures.lines().count(), 6);

    let manifest = read_manifest(&out.dir).unwrap();
    assert_eq!(manifest.corpus_hash, out.manifest.corpus_hash);
    let run = load_run(&out.dir).unwrap();
    assert!(verify_run(&run).unwrap().is_empty());

    let report = build_report(&[run]).unwrap();
    let row = &report.model_by_bias[0];
    assert_eq!((row.overall.k, row.overall.n, row.overall.failed), (7, 20, 6));
    assert_eq!(row.overall.display(), "35.0");
}

#[test]
fn report_refuses_mixed_corpora() {
    let tmp = tempfile::tempdir().unwrap();
    save_corpus(&tmp.path().join("a.jsonl"), &corpus(30, "a")).unwrap();
    save_corpus(&tmp.path().join("b.jsonl"), &corpus(30, "b")).unwrap();
    let a = execute(&config(tmp.path(), "a.jsonl"), &[Box::new(Flaky)]).unwrap();
    let b = execute(&config(tmp.path(), "b.jsonl"), &[Box::new(Flaky)]).unwrap();
    assert_ne!(a.dir, b.dir);
    let runs = vec![load_run(&a.dir).unwrap(), load_run(&b.dir).unwrap()];
    assert!(matches!(build_report(&runs), Err(Error::Report(_))));
}

#[test]
fn tampered_stats_are_detected() {
    let tmp = tempfile::tempdir().unwrap();
    save_corpus(&tmp.path().join("a.jsonl"), &corpus(30, "a")).unwrap();
    let out = execute(&config(tmp.path(), "a.jsonl"), &[Box::new(Flaky)]).unwrap();
    let path = out.dir.join("cell_stats.json");
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("\"k\": 7"));
    std::fs::write(&path, text.replacen("\"k\": 7", "\"k\": 8", 1)).unwrap();
    let run = load_run(&out.dir).unwrap();
    assert!(!verify_run(&run).unwrap().is_empty());
}
