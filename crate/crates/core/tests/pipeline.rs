use std::fs;

use wifi2cap::commands::{cmd_ablate, cmd_eval, cmd_synth, cmd_train, cmd_viz};
use wifi2cap::config::{parse_stages, MirrorMode, RunConfig, Stage};
use wifi2cap::error::Error;
use wifi2cap::metrics::read_similarity_csv;
use wifi2cap::pipeline::{report_bytes, run_ablation, Arm, RunManifest, Session};
use wifi2cap::synth::Dataset;

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dataset.classes = 4;
    cfg.dataset.clips_per_class = 8;
    cfg.teacher.steps = 4;
    cfg.teacher.batch_size = 8;
    cfg.student.align_steps = 3;
    cfg.student.text_steps = 3;
    cfg.student.batch_size = 4;
    cfg.decoder.d_model = 32;
    cfg.decoder.steps = 3;
    cfg.decoder.batch_size = 8;
    cfg.prefix.steps = 3;
    cfg.prefix.batch_size = 8;
    cfg.prefix.hidden = 32;
    cfg.prefix.prefix_len = 2;
    cfg.eval.overfit_clips = 4;
    cfg
}

#[test]
fn staged_training_resumes_from_disk_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let mut cfg = tiny();
    cmd_synth(&cfg, out).unwrap();
    for stages in ["s1", "s2_1,s2_2", "s3"] {
        cfg.stages = parse_stages(stages).unwrap();
        cmd_train(&cfg, out, false).unwrap();
    }
    for kind in ["teacher", "student", "decoder", "prefix"] {
        assert!(out.join(kind).join("checkpoint.json").exists(), "{kind}");
    }
    let report = cmd_eval(&cfg, out, "held_out").unwrap();
    assert_eq!(report.split, "held_out");
    assert!(report.scores.bleu4 >= 0.0 && report.scores.bleu4 <= 100.0);
    let ev = out.join("eval").join("held_out");
    let sim = read_similarity_csv(&ev.join("similarity.csv")).unwrap();
    assert_eq!(sim.nrows(), report.clips);
    assert!(ev.join("similarity.png").exists() && ev.join("captions.tsv").exists());
    cmd_viz(&cfg, out, "train").unwrap();

    let manifest: RunManifest = serde_json::from_slice(&fs::read(out.join(RunManifest::FILE)).unwrap()).unwrap();
    manifest.verify(out).unwrap();
    let stages: Vec<&str> = manifest.frozen_checks.iter().map(|c| c.stage.as_str()).collect();
    for s in ["s1", "s2_1", "s2_2", "s3"] {
        assert!(stages.contains(&s), "no frozen check for {s}");
    }
    assert!(manifest.frozen_checks.iter().all(|c| c.holds()));

    fs::write(out.join("eval/held_out/captions.tsv"), "tampered\n").unwrap();
    assert!(matches!(manifest.verify(out), Err(Error::Integrity { .. })));
}

#[test]
fn missing_prerequisites_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.stages = vec![Stage::S2_1];
    let err = cmd_train(&cfg, dir.path(), false).unwrap_err();
    assert!(matches!(err, Error::MissingDependency { ref stage, .. } if stage == "s2_1"), "{err}");
    cfg.stages = vec![Stage::S3];
    let err = cmd_train(&cfg, dir.path(), false).unwrap_err();
    assert!(matches!(err, Error::MissingDependency { ref stage, .. } if stage == "s3"), "{err}");
    cmd_train(&cfg, dir.path(), true).unwrap();
    assert!(cmd_eval(&cfg, dir.path(), "test").is_ok());
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(cmd_eval(&cfg, empty.path(), "test"), Err(Error::MissingDependency { .. })));
}

#[test]
fn repeated_runs_are_bit_identical() {
    let cfg = tiny();
    let ds = Dataset::generate(&cfg.dataset, cfg.seed).unwrap();
    let arm = Arm::full(&cfg);
    let a = Session::new(&cfg, &ds).run_arm(&arm, Some("held_out")).unwrap();
    let b = Session::new(&cfg, &ds).run_arm(&arm, Some("held_out")).unwrap();
    let (a, b) = (a.evaluation.unwrap().report, b.evaluation.unwrap().report);
    assert_eq!(report_bytes(&a).unwrap(), report_bytes(&b).unwrap());
    let mut other = cfg.clone();
    other.seed += 1;
    let ds2 = Dataset::generate(&other.dataset, other.seed).unwrap();
    let c = Session::new(&other, &ds2).run_arm(&Arm::full(&other), Some("held_out")).unwrap();
    assert_ne!(report_bytes(&a).unwrap(), report_bytes(&c.evaluation.unwrap().report).unwrap());
}

#[test]
fn ablation_keeps_going_past_failed_arms() {
    let cfg = tiny();
    let ds = Dataset::generate(&cfg.dataset, cfg.seed).unwrap();
    let mut session = Session::new(&cfg, &ds);
    let mut arms = vec![Arm::full(&cfg)];
    arms.push(Arm { name: "no teacher".into(), stages: vec![Stage::S2_1, Stage::S3], ..Arm::full(&cfg) });
    arms.push(Arm { name: "off".into(), mirror: MirrorMode::Off, ..Arm::full(&cfg) });
    let outcome = run_ablation(&mut session, &arms, "held_out");
    assert_eq!(outcome.rows.len(), 3);
    assert_eq!(outcome.rows[0].status, "ok");
    assert!(outcome.rows[1].status.starts_with("failed"));
    assert!(outcome.rows[1].bleu4.is_none());
    assert_eq!(outcome.rows[2].status, "ok");
    assert_eq!(outcome.reports.len(), 2);
}

#[test]
fn ablation_command_writes_one_row_per_arm() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.ablation.prefix_lens = vec![1];
    let rows = cmd_ablate(&cfg, dir.path()).unwrap();
    assert_eq!(rows.len(), 7);
    let text = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(text.lines().count(), 8);
    // the full arm appears in both groups and is trained once
    let full: Vec<_> = rows.iter().filter(|r| r.stages == "S1 + S2-1 + S2-2 + S3" && r.mirror == "full" && r.prefix_len == 2).collect();
    assert_eq!(full.len(), 2);
    assert_eq!(full[0].bleu4, full[1].bleu4);
}
