//! Stage orchestration, evaluation, ablation arms and run manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::DType;
use log::{info, warn};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
use crate::config::{MirrorMode, RunConfig, Stage};
use crate::error::{Error, Result};
use crate::generator::{
    generate_captions, lm_stats, pretrain_decoder, train_prefix, Decoder, DecoderArch, Generated, LmStats,
    PrefixArch, PrefixMap,
};
use crate::metrics::{deviations, direction_accuracy, retrieval_top1, score_corpus, EvalReport, REPORT_SCHEMA_VERSION};
use crate::nn::ParamStore;
use crate::optim::StepLog;
use crate::seed::{sha256_hex, substream, Rng};
use crate::student::{student_arch, train_align, train_text, Student, StudentArch};
use crate::synth::{Dataset, Split};
use crate::teacher::{train_teacher, Teacher, TeacherArch};

/// Indices of a named split; `held_out` is validation plus test.
pub fn split_indices(ds: &Dataset, split: &str) -> Result<Vec<usize>> {
    let idx = if split == "held_out" { ds.held_out_indices() } else { ds.indices(Split::parse(split)?) };
    if idx.is_empty() {
        return Err(Error::Config(format!("split '{split}' has no clips")));
    }
    Ok(idx)
}

fn unused_rng() -> Rng {
    substream(0, "frozen-build")
}

pub fn teacher_arch(cfg: &RunConfig, ds: &Dataset) -> TeacherArch {
    TeacherArch {
        config: cfg.teacher.clone(),
        frames: ds.config.features.frames,
        feature_dim: ds.config.features.dim,
    }
}

pub fn decoder_arch(cfg: &RunConfig, ds: &Dataset) -> DecoderArch {
    DecoderArch { config: cfg.decoder.clone(), vocab_size: ds.vocab.len() }
}

pub fn student_arch_for(cfg: &RunConfig, ds: &Dataset) -> StudentArch {
    student_arch(ds, &cfg.student, cfg.teacher.embed_dim)
}

/// Read-only modules over a parameter store.
pub fn frozen_teacher(store: &ParamStore, arch: &TeacherArch) -> Result<Teacher> {
    Teacher::new(arch, &mut store.frozen(), &mut unused_rng())
}

pub fn frozen_student(store: &ParamStore, arch: &StudentArch) -> Result<Student> {
    Student::new(arch, &mut store.frozen(), &mut unused_rng())
}

pub fn frozen_decoder(store: &ParamStore, arch: &DecoderArch) -> Result<Decoder> {
    Decoder::new(arch, &mut store.frozen(), &mut unused_rng())
}

pub fn frozen_prefix(store: &ParamStore, arch: &PrefixArch) -> Result<PrefixMap> {
    PrefixMap::new(arch, &mut store.frozen(), &mut unused_rng())
}

/// Checksums of a module that must not change during a stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenCheck {
    pub module: String,
    pub stage: String,
    pub before: String,
    pub after: String,
}

impl FrozenCheck {
    pub fn holds(&self) -> bool {
        self.before == self.after
    }
}

fn frozen_check(module: &str, stage: Stage, before: String, after: String) -> Result<FrozenCheck> {
    let check = FrozenCheck { module: module.into(), stage: stage.to_string(), before, after };
    if !check.holds() {
        return Err(Error::Integrity {
            path: PathBuf::from(format!("<{module} during {stage}>")),
            expected: check.before,
            found: check.after,
        });
    }
    Ok(check)
}

/// Trained (or initialized) parameters plus how they came to be.
#[derive(Clone)]
pub struct Product {
    pub store: ParamStore,
    pub log: Option<StepLog>,
    pub frozen: Vec<FrozenCheck>,
    pub seconds: f64,
    /// Stages applied, in order.
    pub stages: Vec<String>,
}

impl Product {
    fn initial(store: ParamStore) -> Self {
        Self { store, log: None, frozen: Vec::new(), seconds: 0.0, stages: Vec::new() }
    }
}

/// Teacher at its seeded initialization, used when Stage 1 is skipped.
pub fn initial_teacher(cfg: &RunConfig, ds: &Dataset) -> Result<ParamStore> {
    let mut store = ParamStore::new(DType::F32);
    Teacher::new(&teacher_arch(cfg, ds), &mut store, &mut substream(cfg.seed, "s1"))?;
    Ok(store)
}

pub fn initial_student(cfg: &RunConfig, ds: &Dataset) -> Result<ParamStore> {
    let mut store = ParamStore::new(DType::F32);
    Student::new(&student_arch_for(cfg, ds), &mut store, &mut substream(cfg.seed, "student-init"))?;
    Ok(store)
}

pub fn stage_s1(cfg: &RunConfig, ds: &Dataset, mirror: bool) -> Result<Product> {
    let t0 = Instant::now();
    let enc_before = ds.encoders.checksum();
    let run = train_teacher(ds, &cfg.teacher, &cfg.loss, mirror, &mut substream(cfg.seed, "s1"))?;
    let check = frozen_check("encoders", Stage::S1, enc_before, ds.encoders.checksum())?;
    Ok(Product {
        store: run.store,
        log: Some(run.log),
        frozen: vec![check],
        seconds: t0.elapsed().as_secs_f64(),
        stages: vec![format!("s1(mirror={mirror})")],
    })
}

fn student_stage(
    cfg: &RunConfig,
    ds: &Dataset,
    teacher_store: &ParamStore,
    base: &Product,
    stage: Stage,
    mirror: bool,
) -> Result<Product> {
    let t0 = Instant::now();
    let teacher = frozen_teacher(teacher_store, &teacher_arch(cfg, ds))?;
    let teacher_before = teacher_store.checksum()?;
    let enc_before = ds.encoders.checksum();
    let mut store = base.store.deep_clone()?;
    let student = Student::new(&student_arch_for(cfg, ds), &mut store, &mut substream(cfg.seed, "student-init"))?;
    let run = match stage {
        Stage::S2_1 => train_align(&student, &store, &teacher, ds, &cfg.loss, &mut substream(cfg.seed, "s2_1"))?,
        Stage::S2_2 => train_text(&student, &store, &teacher, ds, &cfg.loss, mirror, &mut substream(cfg.seed, "s2_2"))?,
        other => return Err(Error::Config(format!("{other} is not a student stage"))),
    };
    let frozen = vec![
        frozen_check("teacher", stage, teacher_before, teacher_store.checksum()?)?,
        frozen_check("encoders", stage, enc_before, ds.encoders.checksum())?,
    ];
    let mut stages = base.stages.clone();
    stages.push(match stage {
        Stage::S2_2 => format!("s2_2(mirror={mirror})"),
        s => s.to_string(),
    });
    Ok(Product { store, log: Some(run.log), frozen, seconds: t0.elapsed().as_secs_f64(), stages })
}

pub fn stage_s2_1(cfg: &RunConfig, ds: &Dataset, teacher: &ParamStore, base: &Product) -> Result<Product> {
    student_stage(cfg, ds, teacher, base, Stage::S2_1, false)
}

pub fn stage_s2_2(cfg: &RunConfig, ds: &Dataset, teacher: &ParamStore, base: &Product, mirror: bool) -> Result<Product> {
    student_stage(cfg, ds, teacher, base, Stage::S2_2, mirror)
}

/// Token ids of every clip's caption.
pub fn caption_tokens(ds: &Dataset) -> Vec<Vec<u32>> {
    ds.clips.iter().map(|c| c.caption_tokens.clone()).collect()
}

/// Stage 0: decoder pretraining on train-split captions.
pub fn stage_s0(cfg: &RunConfig, ds: &Dataset) -> Result<Product> {
    let t0 = Instant::now();
    let corpus: Vec<Vec<u32>> = ds.indices(Split::Train).iter().map(|&i| ds.clips[i].caption_tokens.clone()).collect();
    let run = pretrain_decoder(&corpus, ds.vocab.len(), &cfg.decoder, &mut substream(cfg.seed, "s0"))?;
    Ok(Product {
        store: run.store,
        log: Some(run.log),
        frozen: Vec::new(),
        seconds: t0.elapsed().as_secs_f64(),
        stages: vec!["s0".into()],
    })
}

/// Stage 3 on the given clips.
pub fn stage_s3(
    cfg: &RunConfig,
    ds: &Dataset,
    decoder_store: &ParamStore,
    student_store: &ParamStore,
    prefix_cfg: &crate::generator::PrefixConfig,
    clips: &[usize],
    stream: &str,
) -> Result<Product> {
    let t0 = Instant::now();
    let decoder = frozen_decoder(decoder_store, &decoder_arch(cfg, ds))?;
    let student = frozen_student(student_store, &student_arch_for(cfg, ds))?;
    let (dec_before, stu_before) = (decoder_store.checksum()?, student_store.checksum()?);
    let all: Vec<usize> = (0..ds.clips.len()).collect();
    let emb = student.embed_clips(ds, &all)?;
    let run = train_prefix(&decoder, &emb, &caption_tokens(ds), clips, prefix_cfg, &mut substream(cfg.seed, stream))?;
    let frozen = vec![
        frozen_check("decoder", Stage::S3, dec_before, decoder_store.checksum()?)?,
        frozen_check("student", Stage::S3, stu_before, student_store.checksum()?)?,
    ];
    Ok(Product {
        store: run.store,
        log: Some(run.log),
        frozen,
        seconds: t0.elapsed().as_secs_f64(),
        stages: vec![format!("s3(prefix_len={})", prefix_cfg.prefix_len)],
    })
}

/// Teacher text embeddings for `idx`, computed once per distinct caption
/// so identical captions get bit-identical rows.
pub fn caption_embeddings(teacher: &Teacher, ds: &Dataset, idx: &[usize]) -> Result<Array2<f32>> {
    let mut first: BTreeMap<&str, usize> = BTreeMap::new();
    let mut unique = Vec::new();
    for &i in idx {
        let cap = ds.clips[i].caption.as_str();
        if !first.contains_key(cap) {
            first.insert(cap, unique.len());
            unique.push(i);
        }
    }
    let emb = teacher.embed_texts(ds, &unique)?;
    let d = emb.ncols();
    let mut out = Array2::<f32>::zeros((idx.len(), d));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&emb.row(first[ds.clips[i].caption.as_str()]));
    }
    Ok(out)
}

/// CSI→text top-1 on a clip set.
pub fn alignment_top1(teacher: &Teacher, student: &Student, ds: &Dataset, idx: &[usize]) -> Result<(f64, Array2<f64>)> {
    let c = student.embed_clips(ds, idx)?;
    let t = caption_embeddings(teacher, ds, idx)?;
    retrieval_top1(&c, &t)
}

pub struct Evaluation {
    pub report: EvalReport,
    pub similarity: Array2<f64>,
    pub captions: Vec<(String, Generated)>,
}

pub struct EvalModels<'a> {
    pub teacher: &'a Teacher,
    pub student: &'a Student,
    pub decoder: &'a Decoder,
    pub prefix: &'a PrefixMap,
}

/// Generates captions for a split and scores everything.
pub fn evaluate(cfg: &RunConfig, ds: &Dataset, arm: &str, models: &EvalModels, split: &str) -> Result<Evaluation> {
    let idx = split_indices(ds, split)?;
    let c = models.student.embed_clips(ds, &idx)?;
    let t = caption_embeddings(models.teacher, ds, &idx)?;
    let (top1, similarity) = retrieval_top1(&c, &t)?;
    let generated = generate_captions(models.decoder, models.prefix, &c, &ds.vocab, &cfg.decode)?;
    let ids: Vec<String> = idx.iter().map(|&i| ds.clips[i].id.clone()).collect();
    let candidates: Vec<String> = generated.iter().map(|g| g.text.clone()).collect();
    let truncated: Vec<bool> = generated.iter().map(|g| g.truncated).collect();
    let references: Vec<String> = idx.iter().map(|&i| ds.clips[i].caption.clone()).collect();
    let (scores, per_clip) = score_corpus(&ids, &candidates, &truncated, &references)?;
    let directional: Vec<usize> = (0..idx.len()).filter(|&r| ds.clips[idx[r]].is_directional()).collect();
    let direction = if directional.is_empty() {
        None
    } else {
        let gen: Vec<String> = directional.iter().map(|&r| candidates[r].clone()).collect();
        let truth: Vec<String> = directional.iter().map(|&r| references[r].clone()).collect();
        Some(direction_accuracy(&gen, &truth, &ds.lexicon)?)
    };
    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        arm: arm.to_string(),
        split: split.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        clips: idx.len(),
        scores,
        direction_accuracy: direction,
        retrieval_top1: top1,
        per_clip,
        deviations: deviations(),
    };
    Ok(Evaluation { report, similarity, captions: ids.into_iter().zip(generated).collect() })
}

/// One configuration of the pipeline inside an ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub group: String,
    pub stages: Vec<Stage>,
    pub mirror: MirrorMode,
    /// Allows Stage 3 on an untrained student.
    pub baseline: bool,
    pub prefix_len: usize,
}

impl Arm {
    pub fn full(cfg: &RunConfig) -> Self {
        Self {
            name: "full".into(),
            group: "main".into(),
            stages: Stage::ALL.to_vec(),
            mirror: cfg.mirror,
            baseline: false,
            prefix_len: cfg.prefix.prefix_len,
        }
    }

    pub fn from_config(cfg: &RunConfig, name: &str, baseline: bool) -> Self {
        Self {
            name: name.into(),
            group: "main".into(),
            stages: cfg.stages.clone(),
            mirror: cfg.mirror,
            baseline,
            prefix_len: cfg.prefix.prefix_len,
        }
    }

    fn has(&self, s: Stage) -> bool {
        self.stages.contains(&s)
    }

    pub fn stage_label(&self) -> String {
        if self.baseline && !self.has(Stage::S2_1) && !self.has(Stage::S2_2) {
            return "S3 only (untrained CSI encoder)".into();
        }
        self.stages
            .iter()
            .map(|s| match s {
                Stage::S1 => "S1",
                Stage::S2_1 => "S2-1",
                Stage::S2_2 => "S2-2",
                Stage::S3 => "S3",
            })
            .collect::<Vec<_>>()
            .join(" + ")
    }
}

/// Stage arms, mirror arms, optional baseline and prefix-length arms.
pub fn ablation_grid(cfg: &RunConfig) -> Vec<Arm> {
    let lp = cfg.prefix.prefix_len;
    let arm = |name: &str, group: &str, stages: &[Stage], mirror: MirrorMode| Arm {
        name: name.into(),
        group: group.into(),
        stages: stages.to_vec(),
        mirror,
        baseline: false,
        prefix_len: lp,
    };
    let mut out = Vec::new();
    let a = &cfg.ablation;
    if a.stage_arms {
        out.push(arm("S2-2 + S3", "stages", &[Stage::S2_2, Stage::S3], cfg.mirror));
        out.push(arm("S1 + S2-1 + S3", "stages", &[Stage::S1, Stage::S2_1, Stage::S3], cfg.mirror));
        out.push(arm("S1 + S2-1 + S2-2 + S3", "stages", &Stage::ALL, cfg.mirror));
    }
    if a.mirror_arms {
        out.push(arm("w/o mirror", "mirror", &Stage::ALL, MirrorMode::Off));
        out.push(arm("teacher-only mirror", "mirror", &Stage::ALL, MirrorMode::Teacher));
        out.push(arm("full mirror", "mirror", &Stage::ALL, MirrorMode::Full));
    }
    if a.baseline {
        let mut b = arm("baseline CSI->LM", "baseline", &[Stage::S3], cfg.mirror);
        b.baseline = true;
        out.push(b);
    }
    for &p in &a.prefix_lens {
        let mut x = arm(&format!("full, L_p={p}"), "prefix", &Stage::ALL, cfg.mirror);
        x.prefix_len = p;
        out.push(x);
    }
    out
}

pub struct ArmRun {
    pub arm: Arm,
    pub teacher_key: String,
    pub student_key: String,
    pub prefix_key: Option<String>,
    pub evaluation: Option<Evaluation>,
}

/// Memoizing runner: arms that share a prefix of stages reuse the trained
/// parameters.
pub struct Session<'a> {
    pub cfg: &'a RunConfig,
    pub ds: &'a Dataset,
    teachers: BTreeMap<String, Product>,
    students: BTreeMap<String, Product>,
    decoder: Option<Product>,
    prefixes: BTreeMap<String, Product>,
    preloaded_teacher: bool,
    preloaded_student: bool,
}

impl<'a> Session<'a> {
    pub fn new(cfg: &'a RunConfig, ds: &'a Dataset) -> Self {
        Self {
            cfg,
            ds,
            teachers: BTreeMap::new(),
            students: BTreeMap::new(),
            decoder: None,
            prefixes: BTreeMap::new(),
            preloaded_teacher: false,
            preloaded_student: false,
        }
    }

    /// Uses a teacher from an earlier run when Stage 1 is not requested.
    pub fn preload_teacher(&mut self, store: ParamStore) {
        self.teachers.insert("t:disk".into(), Product::initial(store));
        self.preloaded_teacher = true;
    }

    /// Uses a student from an earlier run when no Stage 2 is requested,
    /// and as the starting point of a lone Stage 2-2.
    pub fn preload_student(&mut self, store: ParamStore) {
        self.students.insert("s:disk".into(), Product::initial(store));
        self.preloaded_student = true;
    }

    pub fn preload_decoder(&mut self, store: ParamStore) {
        self.decoder = Some(Product::initial(store));
    }

    pub fn teacher(&self, key: &str) -> Option<&Product> {
        self.teachers.get(key)
    }

    pub fn student(&self, key: &str) -> Option<&Product> {
        self.students.get(key)
    }

    pub fn decoder(&self) -> Option<&Product> {
        self.decoder.as_ref()
    }

    pub fn prefix(&self, key: &str) -> Option<&Product> {
        self.prefixes.get(key)
    }

    fn ensure_teacher(&mut self, arm: &Arm) -> Result<String> {
        let key = if arm.has(Stage::S1) {
            format!("t:s1:mirror={}", arm.mirror.teacher())
        } else if self.preloaded_teacher {
            "t:disk".into()
        } else if arm.has(Stage::S2_1) {
            return Err(Error::MissingDependency {
                stage: "s2_1".into(),
                requires: "a teacher checkpoint".into(),
                prior: "s1".into(),
            });
        } else {
            "t:init".into()
        };
        if !self.teachers.contains_key(&key) {
            let product = if arm.has(Stage::S1) {
                info!("stage s1 (mirror {})", arm.mirror.teacher());
                stage_s1(self.cfg, self.ds, arm.mirror.teacher())?
            } else {
                Product::initial(initial_teacher(self.cfg, self.ds)?)
            };
            self.teachers.insert(key.clone(), product);
        }
        Ok(key)
    }

    fn ensure_student(&mut self, arm: &Arm, teacher_key: &str) -> Result<String> {
        let (s21, s22) = (arm.has(Stage::S2_1), arm.has(Stage::S2_2));
        let mut key = if !s21 && self.preloaded_student {
            "s:disk".to_string()
        } else if !s21 && !s22 && !arm.baseline {
            return Err(Error::MissingDependency {
                stage: "s3".into(),
                requires: "a student checkpoint".into(),
                prior: "s2_1 or s2_2".into(),
            });
        } else {
            "s:init".to_string()
        };
        if key == "s:init" && !self.students.contains_key(&key) {
            self.students.insert(key.clone(), Product::initial(initial_student(self.cfg, self.ds)?));
        }
        for (stage, on) in [(Stage::S2_1, s21), (Stage::S2_2, s22)] {
            if !on {
                continue;
            }
            let mirror = stage == Stage::S2_2 && arm.mirror.student();
            let next = format!("{key}>{stage}({teacher_key},mirror={mirror})");
            if !self.students.contains_key(&next) {
                info!("stage {stage} from {key}");
                let base = &self.students[&key];
                let teacher = &self.teachers[teacher_key].store;
                let product = student_stage(self.cfg, self.ds, teacher, base, stage, mirror)?;
                self.students.insert(next.clone(), product);
            }
            key = next;
        }
        Ok(key)
    }

    fn ensure_decoder(&mut self) -> Result<()> {
        if self.decoder.is_none() {
            info!("stage s0 (decoder pretraining)");
            self.decoder = Some(stage_s0(self.cfg, self.ds)?);
        }
        Ok(())
    }

    fn ensure_prefix(&mut self, arm: &Arm, student_key: &str) -> Result<String> {
        self.ensure_decoder()?;
        let key = format!("{student_key}>s3(prefix_len={})", arm.prefix_len);
        if !self.prefixes.contains_key(&key) {
            info!("stage s3 with prefix length {}", arm.prefix_len);
            let pcfg = crate::generator::PrefixConfig { prefix_len: arm.prefix_len, ..self.cfg.prefix.clone() };
            let train = self.ds.indices(Split::Train);
            let product = stage_s3(
                self.cfg,
                self.ds,
                &self.decoder.as_ref().expect("decoder ensured").store,
                &self.students[student_key].store,
                &pcfg,
                &train,
                "s3",
            )?;
            self.prefixes.insert(key.clone(), product);
        }
        Ok(key)
    }

    /// Trains whatever the arm needs (reusing earlier work) and, when the arm
    /// includes Stage 3 and a split is given, evaluates it.
    pub fn run_arm(&mut self, arm: &Arm, split: Option<&str>) -> Result<ArmRun> {
        if arm.stages.is_empty() {
            return Err(Error::Config("an arm needs at least one stage".into()));
        }
        let teacher_key = self.ensure_teacher(arm)?;
        let needs_student = arm.has(Stage::S2_1) || arm.has(Stage::S2_2) || arm.has(Stage::S3);
        let student_key = if needs_student { self.ensure_student(arm, &teacher_key)? } else { String::new() };
        let (prefix_key, evaluation) = if arm.has(Stage::S3) {
            let pk = self.ensure_prefix(arm, &student_key)?;
            let ev = match split {
                Some(s) => Some(self.evaluate_keys(&arm.name, &teacher_key, &student_key, &pk, arm.prefix_len, s)?),
                None => None,
            };
            (Some(pk), ev)
        } else {
            (None, None)
        };
        Ok(ArmRun { arm: arm.clone(), teacher_key, student_key, prefix_key, evaluation })
    }

    pub fn evaluate_keys(
        &self,
        name: &str,
        teacher_key: &str,
        student_key: &str,
        prefix_key: &str,
        prefix_len: usize,
        split: &str,
    ) -> Result<Evaluation> {
        let (cfg, ds) = (self.cfg, self.ds);
        let teacher = frozen_teacher(&self.teachers[teacher_key].store, &teacher_arch(cfg, ds))?;
        let student = frozen_student(&self.students[student_key].store, &student_arch_for(cfg, ds))?;
        let darch = decoder_arch(cfg, ds);
        let decoder = frozen_decoder(&self.decoder.as_ref().expect("decoder trained").store, &darch)?;
        let parch = PrefixArch::for_decoder(
            &crate::generator::PrefixConfig { prefix_len, ..cfg.prefix.clone() },
            cfg.teacher.embed_dim,
            &darch,
        );
        let prefix = frozen_prefix(&self.prefixes[prefix_key].store, &parch)?;
        let models = EvalModels { teacher: &teacher, student: &student, decoder: &decoder, prefix: &prefix };
        evaluate(cfg, ds, name, &models, split)
    }

    /// CSI→text top-1 for a trained arm on train and held-out clips.
    pub fn alignment(&self, run: &ArmRun) -> Result<(f64, f64)> {
        let (cfg, ds) = (self.cfg, self.ds);
        let teacher = frozen_teacher(&self.teachers[&run.teacher_key].store, &teacher_arch(cfg, ds))?;
        let student = frozen_student(&self.students[&run.student_key].store, &student_arch_for(cfg, ds))?;
        let train = alignment_top1(&teacher, &student, ds, &ds.indices(Split::Train))?.0;
        let held = alignment_top1(&teacher, &student, ds, &ds.held_out_indices())?.0;
        Ok((train, held))
    }

    /// Training time of every stage behind an arm, memoized or not.
    pub fn training_seconds(&self, run: &ArmRun) -> f64 {
        let mut total = self.teachers.get(&run.teacher_key).map_or(0.0, |p| p.seconds);
        let mut key = String::new();
        for (i, part) in run.student_key.split('>').enumerate() {
            if i > 0 {
                key.push('>');
            }
            key.push_str(part);
            total += self.students.get(&key).map_or(0.0, |p| p.seconds);
        }
        if let Some(pk) = &run.prefix_key {
            total += self.decoder.as_ref().map_or(0.0, |p| p.seconds);
            total += self.prefixes.get(pk).map_or(0.0, |p| p.seconds);
        }
        total
    }

    /// Every frozen-contract check recorded so far.
    pub fn frozen_checks(&self) -> Vec<FrozenCheck> {
        self.teachers
            .values()
            .chain(self.students.values())
            .chain(self.decoder.iter())
            .chain(self.prefixes.values())
            .flat_map(|p| p.frozen.iter().cloned())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverfitResult {
    pub clips: usize,
    pub conditioned: LmStatsRecord,
    pub unconditional: LmStatsRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmStatsRecord {
    pub nll: f64,
    pub token_accuracy: f64,
    pub perplexity: f64,
}

impl From<LmStats> for LmStatsRecord {
    fn from(s: LmStats) -> Self {
        Self { nll: s.nll, token_accuracy: s.token_accuracy, perplexity: s.perplexity }
    }
}

/// Stage 3 fitted to a small set of training clips and scored on the same
/// clips, against the decoder without any prefix.
pub fn overfit_check(cfg: &RunConfig, ds: &Dataset, decoder_store: &ParamStore, student_store: &ParamStore) -> Result<OverfitResult> {
    let mut train = ds.indices(Split::Train);
    let mut rng = substream(cfg.seed, "overfit");
    rand::seq::SliceRandom::shuffle(train.as_mut_slice(), &mut rng);
    train.truncate(cfg.eval.overfit_clips.max(1));
    train.sort();
    let product = stage_s3(cfg, ds, decoder_store, student_store, &cfg.prefix, &train, "overfit-s3")?;
    let darch = decoder_arch(cfg, ds);
    let decoder = frozen_decoder(decoder_store, &darch)?;
    let student = frozen_student(student_store, &student_arch_for(cfg, ds))?;
    let parch = PrefixArch::for_decoder(&cfg.prefix, cfg.teacher.embed_dim, &darch);
    let map = frozen_prefix(&product.store, &parch)?;
    let all: Vec<usize> = (0..ds.clips.len()).collect();
    let emb = student.embed_clips(ds, &all)?;
    let captions = caption_tokens(ds);
    Ok(OverfitResult {
        clips: train.len(),
        conditioned: lm_stats(&decoder, Some((&map, &emb)), &captions, &train)?.into(),
        unconditional: lm_stats(&decoder, None, &captions, &train)?.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub group: String,
    pub stages: String,
    pub mirror: String,
    pub prefix_len: usize,
    pub bleu4: Option<f64>,
    pub meteor_lite: Option<f64>,
    pub rouge_l: Option<f64>,
    pub cider_d: Option<f64>,
    pub direction_accuracy: Option<f64>,
    pub retrieval_top1: Option<f64>,
    pub status: String,
}

impl AblationRow {
    fn new(arm: &Arm, result: &Result<EvalReport>) -> Self {
        let r = result.as_ref().ok();
        Self {
            arm: arm.name.clone(),
            group: arm.group.clone(),
            stages: arm.stage_label(),
            mirror: arm.mirror.as_str().into(),
            prefix_len: arm.prefix_len,
            bleu4: r.map(|r| r.scores.bleu4),
            meteor_lite: r.map(|r| r.scores.meteor_lite),
            rouge_l: r.map(|r| r.scores.rouge_l),
            cider_d: r.map(|r| r.scores.cider_d),
            direction_accuracy: r.and_then(|r| r.direction_accuracy),
            retrieval_top1: r.map(|r| r.retrieval_top1),
            status: match result {
                Ok(_) => "ok".into(),
                Err(e) => format!("failed: {e}"),
            },
        }
    }
}

pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
    pub reports: Vec<(Arm, EvalReport)>,
}

/// Runs each arm in order, recording failures instead of stopping.
pub fn run_ablation(session: &mut Session, arms: &[Arm], split: &str) -> AblationOutcome {
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for arm in arms {
        info!("ablation arm '{}'", arm.name);
        let result = session.run_arm(arm, Some(split)).and_then(|run| {
            run.evaluation
                .map(|e| e.report)
                .ok_or_else(|| Error::Config(format!("arm '{}' has no Stage 3", arm.name)))
        });
        if let Err(e) = &result {
            warn!("arm '{}' failed: {e}", arm.name);
        }
        rows.push(AblationRow::new(arm, &result));
        if let Ok(r) = result {
            reports.push((arm.clone(), r));
        }
    }
    AblationOutcome { rows, reports }
}

pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub kind: String,
    pub stages: Vec<String>,
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub seconds: f64,
}

/// Append-only record of a run directory's artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub dataset_hash: String,
    pub entries: Vec<ManifestEntry>,
    pub frozen_checks: Vec<FrozenCheck>,
}

impl RunManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn load_or_new(dir: &Path, cfg: &RunConfig, dataset_hash: &str) -> Result<Self> {
        let path = dir.join(Self::FILE);
        if path.exists() {
            let m: RunManifest = serde_json::from_slice(&fs::read(&path)?)?;
            if m.dataset_hash != dataset_hash {
                return Err(Error::Integrity {
                    path,
                    expected: m.dataset_hash,
                    found: dataset_hash.to_string(),
                });
            }
            return Ok(m);
        }
        Ok(Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            config_hash: cfg.hash(),
            seed: cfg.seed,
            dataset_hash: dataset_hash.to_string(),
            entries: Vec::new(),
            frozen_checks: Vec::new(),
        })
    }

    /// Hashes `rel` inside `dir` and appends an entry for it.
    pub fn record(&mut self, dir: &Path, kind: &str, stages: Vec<String>, rel: &str, seconds: f64) -> Result<()> {
        let sha256 = sha256_hex(&fs::read(dir.join(rel))?);
        self.entries.push(ManifestEntry { kind: kind.into(), stages, path: rel.into(), sha256, seconds });
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(Self::FILE), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// Latest entry of a kind.
    pub fn latest(&self, kind: &str) -> Option<&ManifestEntry> {
        self.entries.iter().rev().find(|e| e.kind == kind)
    }

    /// Every artifact still on disk with its recorded hash. Superseded
    /// entries for a path are skipped in favour of the latest one.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in self.entries.iter().rev() {
            if !seen.insert(e.path.clone()) {
                continue;
            }
            let path = dir.join(&e.path);
            let found = sha256_hex(&fs::read(&path)?);
            if found != e.sha256 {
                return Err(Error::Integrity { path, expected: e.sha256.clone(), found });
            }
        }
        Ok(())
    }
}

/// Loads `dir/dataset` or generates and saves it. A dataset on disk must
/// match the configured one.
pub fn load_or_synth(cfg: &RunConfig, dir: &Path) -> Result<(Dataset, String)> {
    let ds_dir = dir.join("dataset");
    if ds_dir.join("manifest.json").exists() {
        let ds = Dataset::load(&ds_dir)?;
        if ds.config != cfg.dataset || ds.seed != cfg.seed {
            return Err(Error::Config(format!(
                "{} holds a dataset for a different config or seed; use a fresh --out",
                ds_dir.display()
            )));
        }
        let hash = Dataset::hash_on_disk(&ds_dir)?;
        return Ok((ds, hash));
    }
    let ds = Dataset::generate(&cfg.dataset, cfg.seed)?;
    let hash = ds.save(&ds_dir)?;
    Ok((ds, hash))
}

fn meta(cfg: &RunConfig, kind: &str, store: &ParamStore, product: &Product, arch: serde_json::Value) -> Result<CheckpointMeta> {
    Ok(CheckpointMeta {
        version: CHECKPOINT_VERSION,
        kind: kind.into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        steps: product.log.as_ref().map_or(0, StepLog::len),
        stages: product.stages.clone(),
        param_checksum: store.checksum()?,
        arch,
    })
}

/// Writes a product's checkpoint and log and records both.
pub fn persist(
    dir: &Path,
    manifest: &mut RunManifest,
    cfg: &RunConfig,
    kind: &str,
    product: &Product,
    arch: serde_json::Value,
) -> Result<()> {
    let rel = format!("{kind}/checkpoint.json");
    save_checkpoint(&dir.join(kind), &product.store, &meta(cfg, kind, &product.store, product, arch)?)?;
    manifest.record(dir, kind, product.stages.clone(), &rel, product.seconds)?;
    if let Some(log) = &product.log {
        let stage = product.stages.last().map(|s| s.split('(').next().unwrap_or(s).to_string()).unwrap_or_default();
        let log_rel = format!("logs/{kind}_{stage}.csv");
        log.write_csv(&dir.join(&log_rel))?;
        manifest.record(dir, "log", product.stages.clone(), &log_rel, 0.0)?;
    }
    Ok(())
}

pub fn load_store(dir: &Path, kind: &str) -> Result<Option<ParamStore>> {
    if !dir.join(kind).join("checkpoint.json").exists() {
        return Ok(None);
    }
    Ok(Some(load_checkpoint(&dir.join(kind), kind)?.0))
}

/// Writes captions as `id<TAB>caption` lines.
pub fn write_captions(path: &Path, captions: &[(String, Generated)]) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    let mut text = String::new();
    for (id, g) in captions {
        text.push_str(id);
        text.push('\t');
        text.push_str(&g.text);
        if g.truncated {
            text.push_str("\t[truncated]");
        }
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Canonical bytes of a report, used for equality across runs.
pub fn report_bytes(report: &EvalReport) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec_pretty(report)?)
}
