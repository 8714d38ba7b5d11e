//! Subcommands behind the `wifi2cap` binary.

use std::fs;
use std::path::Path;

use log::{info, warn};

use crate::checkpoint::load_checkpoint;
use crate::config::{RunConfig, Stage};
use crate::error::{Error, Result};
use crate::generator::PrefixArch;
use crate::metrics::export_similarity_heat;
use crate::pipeline::{
    ablation_grid, alignment_top1, decoder_arch, evaluate, frozen_decoder, frozen_prefix, frozen_student,
    frozen_teacher, initial_teacher, load_or_synth, load_store, persist, run_ablation, split_indices,
    student_arch_for, teacher_arch, write_ablation_csv, write_captions, Arm, EvalModels, RunManifest, Session,
};
use crate::synth::Dataset;

/// Generates the dataset into `out/dataset`.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<String> {
    fs::create_dir_all(out)?;
    let (ds, hash) = load_or_synth(cfg, out)?;
    info!("dataset with {} clips, hash {hash}", ds.clips.len());
    Ok(hash)
}

/// Runs the configured stages, picking up checkpoints already in `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path, baseline: bool) -> Result<RunManifest> {
    fs::create_dir_all(out)?;
    let (ds, ds_hash) = load_or_synth(cfg, out)?;
    let mut manifest = RunManifest::load_or_new(out, cfg, &ds_hash)?;
    let mut session = Session::new(cfg, &ds);
    let has = |s: Stage| cfg.stages.contains(&s);
    if !has(Stage::S1) {
        if let Some(t) = load_store(out, "teacher")? {
            session.preload_teacher(t);
        }
    }
    if !has(Stage::S2_1) {
        if let Some(s) = load_store(out, "student")? {
            session.preload_student(s);
        }
    }
    if let Some(d) = load_store(out, "decoder")? {
        session.preload_decoder(d);
    }
    let arm = Arm::from_config(cfg, "train", baseline);
    let run = session.run_arm(&arm, None)?;

    if has(Stage::S1) {
        let p = session.teacher(&run.teacher_key).expect("teacher trained").clone();
        persist(out, &mut manifest, cfg, "teacher", &p, serde_json::to_value(teacher_arch(cfg, &ds))?)?;
    }
    if !run.student_key.is_empty() && run.student_key != "s:disk" {
        let p = session.student(&run.student_key).expect("student trained").clone();
        persist(out, &mut manifest, cfg, "student", &p, serde_json::to_value(student_arch_for(cfg, &ds))?)?;
    }
    if let Some(pk) = &run.prefix_key {
        let d = session.decoder().expect("decoder trained").clone();
        if d.log.is_some() {
            persist(out, &mut manifest, cfg, "decoder", &d, serde_json::to_value(decoder_arch(cfg, &ds))?)?;
        }
        let p = session.prefix(pk).expect("prefix trained").clone();
        let parch = PrefixArch::for_decoder(&cfg.prefix, cfg.teacher.embed_dim, &decoder_arch(cfg, &ds));
        persist(out, &mut manifest, cfg, "prefix", &p, serde_json::to_value(parch)?)?;
    }
    if !run.student_key.is_empty() {
        let (train, held) = session.alignment(&run)?;
        info!("CSI->text top-1: train {train:.3}, held-out {held:.3}");
    }
    manifest.frozen_checks.extend(session.frozen_checks());
    manifest.save(out)?;
    Ok(manifest)
}

fn require_dataset(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    if !out.join("dataset").join("manifest.json").exists() {
        return Err(Error::MissingDependency {
            stage: "eval".into(),
            requires: "a dataset".into(),
            prior: "synth or train".into(),
        });
    }
    Ok(load_or_synth(cfg, out)?.0)
}

fn require_store(out: &Path, kind: &str, prior: &str) -> Result<crate::nn::ParamStore> {
    load_store(out, kind)?.ok_or_else(|| Error::MissingDependency {
        stage: "eval".into(),
        requires: format!("a {kind} checkpoint"),
        prior: prior.into(),
    })
}

/// Scores the checkpoints in `out` on a split and writes the report,
/// captions and similarity heatmap under `out/eval/<split>`.
pub fn cmd_eval(cfg: &RunConfig, out: &Path, split: &str) -> Result<crate::metrics::EvalReport> {
    let ds = require_dataset(cfg, out)?;
    let teacher_store = match load_store(out, "teacher")? {
        Some(t) => t,
        None => {
            warn!("no teacher checkpoint; retrieval uses the untrained teacher");
            initial_teacher(cfg, &ds)?
        }
    };
    let student_store = require_store(out, "student", "s2_1 or s2_2")?;
    let decoder_store = require_store(out, "decoder", "s3")?;
    if !out.join("prefix").join("checkpoint.json").exists() {
        return Err(Error::MissingDependency {
            stage: "eval".into(),
            requires: "a prefix checkpoint".into(),
            prior: "s3".into(),
        });
    }
    let (prefix_store, prefix_meta) = load_checkpoint(&out.join("prefix"), "prefix")?;
    let parch: PrefixArch = serde_json::from_value(prefix_meta.arch)?;

    let teacher = frozen_teacher(&teacher_store, &teacher_arch(cfg, &ds))?;
    let student = frozen_student(&student_store, &student_arch_for(cfg, &ds))?;
    let decoder = frozen_decoder(&decoder_store, &decoder_arch(cfg, &ds))?;
    let prefix = frozen_prefix(&prefix_store, &parch)?;
    let models = EvalModels { teacher: &teacher, student: &student, decoder: &decoder, prefix: &prefix };
    let ev = evaluate(cfg, &ds, "eval", &models, split)?;

    let dir = out.join("eval").join(split);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&ev.report)?)?;
    write_captions(&dir.join("captions.tsv"), &ev.captions)?;
    export_similarity_heat(&ev.similarity, &dir.join("similarity"))?;

    let ds_hash = Dataset::hash_on_disk(&out.join("dataset"))?;
    let mut manifest = RunManifest::load_or_new(out, cfg, &ds_hash)?;
    let stages = vec![format!("eval({split})")];
    for rel in ["report.json", "captions.tsv", "similarity.csv", "similarity.png"] {
        manifest.record(out, "eval", stages.clone(), &format!("eval/{split}/{rel}"), 0.0)?;
    }
    manifest.save(out)?;
    let s = &ev.report.scores;
    info!(
        "{split}: BLEU-4 {:.2} METEOR-lite {:.2} ROUGE-L {:.2} CIDEr-D {:.2} retrieval {:.3}",
        s.bleu4, s.meteor_lite, s.rouge_l, s.cider_d, ev.report.retrieval_top1
    );
    Ok(ev.report)
}

/// Runs the ablation grid; failed arms become rows marked as failed.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<Vec<crate::pipeline::AblationRow>> {
    fs::create_dir_all(out)?;
    let (ds, _) = load_or_synth(cfg, out)?;
    let mut session = Session::new(cfg, &ds);
    let arms = ablation_grid(cfg);
    let outcome = run_ablation(&mut session, &arms, &cfg.eval.split);
    write_ablation_csv(&outcome.rows, &out.join("ablation.csv"))?;
    for (arm, report) in &outcome.reports {
        let slug: String =
            arm.name.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect();
        let dir = out.join("ablation").join(slug);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("report.json"), serde_json::to_vec_pretty(report)?)?;
    }
    let failed = outcome.rows.iter().filter(|r| r.status != "ok").count();
    if failed > 0 {
        warn!("{failed} of {} arms failed", outcome.rows.len());
    }
    Ok(outcome.rows)
}

/// Exports the CSI-text similarity heatmap for a split from the teacher and
/// student checkpoints.
pub fn cmd_viz(cfg: &RunConfig, out: &Path, split: &str) -> Result<f64> {
    let ds = require_dataset(cfg, out)?;
    let teacher_store = match load_store(out, "teacher")? {
        Some(t) => t,
        None => initial_teacher(cfg, &ds)?,
    };
    let student_store = require_store(out, "student", "s2_1 or s2_2")?;
    let teacher = frozen_teacher(&teacher_store, &teacher_arch(cfg, &ds))?;
    let student = frozen_student(&student_store, &student_arch_for(cfg, &ds))?;
    let idx = split_indices(&ds, split)?;
    let (top1, sim) = alignment_top1(&teacher, &student, &ds, &idx)?;
    let dir = out.join("viz").join(split);
    fs::create_dir_all(&dir)?;
    export_similarity_heat(&sim, &dir.join("similarity"))?;
    info!("wrote {} ({} clips, top-1 {top1:.3})", dir.join("similarity.png").display(), idx.len());
    Ok(top1)
}
