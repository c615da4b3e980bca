use std::fs;

use xmodal_core::data::{decode_corpus, encode_corpus};
use xmodal_core::train::{load_corpus, model_from_checkpoint, read_metrics, CHECKPOINT_FILE, METRICS_FILE};
use xmodal_core::{generate_corpus, pretrain, read_corpus, write_corpus, Checkpoint, CorpusRecord, RunConfig, SyntheticCorpusSpec};

fn small() -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.corpus.samples_per_class = 20;
    cfg.schedule.total_steps = 12;
    cfg.log_every = 3;
    cfg.checkpoint_every = 5;
    cfg
}

#[test]
fn identically_seeded_runs_write_identical_logs() {
    let cfg = small();
    let corpus = load_corpus(&cfg).unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let runs: Vec<_> = dirs.iter().map(|d| pretrain(&cfg, &corpus, Some(d.path())).unwrap()).collect();
    let logs: Vec<Vec<_>> = dirs
        .iter()
        .map(|d| read_metrics(d.path().join(METRICS_FILE)).unwrap().iter().map(|m| m.timeless()).collect())
        .collect();
    assert_eq!(logs[0].len(), 4);
    assert_eq!(logs[0], logs[1]);
    assert_eq!(runs[0].model.params, runs[1].model.params);

    let mut other = cfg.clone();
    other.seed += 1;
    let third = pretrain(&other, &corpus, None).unwrap();
    assert_ne!(third.metrics[0].timeless(), logs[0][0]);
}

#[test]
fn metrics_lines_all_parse() {
    let cfg = small();
    let corpus = load_corpus(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    pretrain(&cfg, &corpus, Some(dir.path())).unwrap();
    let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["step", "lr", "total", "vision_vision", "language_vision", "language_language", "vision_language", "wall_time"] {
            assert!(v.get(key).is_some(), "{key} missing from {line}");
        }
    }
}

#[test]
fn reloaded_checkpoint_reproduces_forward_pass_bit_exactly() {
    let cfg = small();
    let corpus = load_corpus(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let run = pretrain(&cfg, &corpus, Some(dir.path())).unwrap();
    let path = dir.path().join(CHECKPOINT_FILE);
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.encode().unwrap(), fs::read(&path).unwrap());
    assert_eq!(ck.step, 12);
    assert_eq!(ck.optimizer.as_ref(), Some(&run.optimizer));
    let model = model_from_checkpoint(&ck, &corpus).unwrap();
    let batch: Vec<&CorpusRecord> = corpus.test.iter().take(8).collect();
    let (v0, l0) = run.model.embeddings(&batch).unwrap();
    let (v1, l1) = model.embeddings(&batch).unwrap();
    let bits = |t: &xmodal_core::Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&v0), bits(&v1));
    assert_eq!(bits(&l0), bits(&l1));
}

#[test]
fn checkpoint_for_a_different_layout_is_rejected() {
    let cfg = small();
    let corpus = load_corpus(&cfg).unwrap();
    let mut ck = pretrain(&cfg, &corpus, None).unwrap().checkpoint(&cfg);
    ck.config.model.d_ff *= 2;
    let err = model_from_checkpoint(&ck, &corpus).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn corpus_file_round_trips_bit_exactly() {
    let spec = SyntheticCorpusSpec {
        samples_per_class: 15,
        seed: 99,
        ..SyntheticCorpusSpec::default()
    };
    let corpus = generate_corpus(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.xclc");
    write_corpus(&path, &corpus).unwrap();
    let bytes = fs::read(&path).unwrap();
    let back = read_corpus(&path).unwrap();
    assert_eq!(back, corpus);
    assert_eq!(encode_corpus(&back).unwrap(), bytes);
    assert_eq!(decode_corpus(&bytes).unwrap(), corpus);
    assert_eq!(generate_corpus(&spec).unwrap(), corpus);
}

#[test]
fn training_from_a_corpus_file_matches_generation() {
    let mut cfg = small();
    let corpus = load_corpus(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.xclc");
    write_corpus(&path, &corpus).unwrap();
    let generated = pretrain(&cfg, &corpus, None).unwrap();
    cfg.corpus_path = Some(path);
    let from_file = pretrain(&cfg, &load_corpus(&cfg).unwrap(), None).unwrap();
    assert_eq!(generated.model.params, from_file.model.params);
}
