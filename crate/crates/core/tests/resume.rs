//! Checkpointed pretraining resumes to the same state as an uninterrupted run.

use span::runner::{load_state, pretrain, RunConfig, RunLock, CHECKPOINT_STEM};
use span::span_reg::TemplateKind;
use span::synthdata::generate_corpus;
use span::templates::build_template_set;

fn config() -> RunConfig {
    let mut c = RunConfig::span(TemplateKind::SpatialHeuristic);
    c.corpus.n_samples = 64;
    c.distill.batch_size = 8;
    c.distill.epochs = 3;
    c
}

#[test]
fn interrupted_run_matches_straight_run() {
    let cfg = config();
    let corpus = generate_corpus(&cfg.corpus).unwrap();
    let set = build_template_set(TemplateKind::SpatialHeuristic, &corpus, &cfg.templates, None).unwrap();
    let straight = pretrain(&cfg, &corpus, Some(&set), None, |_, _| {}).unwrap();

    let tmp = tempfile::tempdir().unwrap();
    let mut short = cfg.clone();
    short.distill.epochs = 1;
    pretrain(&short, &corpus, Some(&set), Some(tmp.path()), |_, _| {}).unwrap();
    assert_eq!(load_state(&tmp.path().join(CHECKPOINT_STEM)).unwrap().epoch, 1);
    let mut seen = Vec::new();
    let resumed = pretrain(&cfg, &corpus, Some(&set), Some(tmp.path()), |e, _| seen.push(e)).unwrap();
    assert_eq!(seen, vec![1, 2]);
    assert_eq!(resumed, straight);
    let log = std::fs::read_to_string(tmp.path().join("loss.csv")).unwrap();
    assert_eq!(log.lines().filter(|l| !l.starts_with('#')).count(), 4);
}

#[test]
fn run_directory_lock_is_exclusive() {
    let tmp = tempfile::tempdir().unwrap();
    let held = RunLock::acquire(tmp.path()).unwrap();
    assert!(RunLock::acquire(tmp.path()).is_err());
    drop(held);
    assert!(RunLock::acquire(tmp.path()).is_ok());
}
