//! Vision–language teacher: temporal aggregation of frame features, video
//! and text projection heads, and contrastive + mirror training.

use candle_core::{DType, Device, Tensor, D};
use log::{info, warn};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{l2_normalize, scalar, BlockShape, Init, Linear, ParamStore, TransformerBlock};
use crate::objectives::{info_nce_symmetric, mirror_hinge_bidirectional, teacher_total, LossConfig};
use crate::optim::{sample_batch, OptimConfig, StepLog, Trainer};
use crate::seed::Rng;
use crate::synth::{Dataset, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    /// Shared alignment dimension d.
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub pos_init_std: f64,
    /// Start with identity attention blocks and zero positions.
    pub identity_init: bool,
    pub steps: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            layers: 2,
            heads: 4,
            ff_mult: 4,
            pos_init_std: 0.02,
            identity_init: false,
            steps: 200,
            batch_size: 32,
            optim: OptimConfig::with_lr(3e-4),
        }
    }
}

/// Everything needed to rebuild a teacher from a parameter store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherArch {
    pub config: TeacherConfig,
    pub frames: usize,
    pub feature_dim: usize,
}

pub struct Teacher {
    arch: TeacherArch,
    pos: Tensor,
    blocks: Vec<TransformerBlock>,
    video_proj: Linear,
    text_proj: Linear,
}

impl Teacher {
    pub fn new(arch: &TeacherArch, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        let cfg = &arch.config;
        let (l, d) = (arch.frames, arch.feature_dim);
        let pos_init = if cfg.identity_init { Init::Zeros } else { Init::Normal(cfg.pos_init_std) };
        let pos = store.get_or_init("teacher.pos", &[l, d], pos_init, rng)?;
        let shape = BlockShape { dim: d, heads: cfg.heads, ff_mult: cfg.ff_mult };
        let blocks = (0..cfg.layers)
            .map(|i| TransformerBlock::new(store, &format!("teacher.block{i}"), shape, cfg.identity_init, rng))
            .collect::<Result<Vec<_>>>()?;
        let video_proj = Linear::new(store, "teacher.video_proj", d, cfg.embed_dim, false, rng)?;
        let text_proj = Linear::new(store, "teacher.text_proj", d, cfg.embed_dim, false, rng)?;
        Ok(Self {
            arch: arch.clone(),
            pos,
            blocks,
            video_proj,
            text_proj,
        })
    }

    pub fn arch(&self) -> &TeacherArch {
        &self.arch
    }

    pub fn embed_dim(&self) -> usize {
        self.arch.config.embed_dim
    }

    /// `(B, L, D)` frame features to `(B, d)` unit video embeddings.
    pub fn encode_video(&self, frames: &Tensor) -> Result<Tensor> {
        let (_, l, d) = frames.dims3()?;
        if (l, d) != (self.arch.frames, self.arch.feature_dim) {
            return Err(Error::dim(format!(
                "teacher expects {}x{} frames, got {l}x{d}",
                self.arch.frames, self.arch.feature_dim
            )));
        }
        let mut h = frames.broadcast_add(&self.pos.to_dtype(frames.dtype())?)?;
        for b in &self.blocks {
            h = b.forward(&h, None, false)?;
        }
        let u = h.mean(1)?;
        l2_normalize(&self.video_proj.forward(&u)?, "teacher video embedding")
    }

    /// `(B, D)` text features to `(B, d)` unit text embeddings.
    pub fn encode_text(&self, text: &Tensor) -> Result<Tensor> {
        let (_, d) = text.dims2()?;
        if d != self.arch.feature_dim {
            return Err(Error::dim(format!(
                "teacher expects {}-dim text features, got {d}",
                self.arch.feature_dim
            )));
        }
        l2_normalize(&self.text_proj.forward(text)?, "teacher text embedding")
    }
}

pub fn frames_tensor(frames: &[&Array2<f32>], dtype: DType) -> Result<Tensor> {
    let (l, d) = frames
        .first()
        .map(|f| f.dim())
        .ok_or_else(|| Error::dim("empty frame batch"))?;
    let mut data = Vec::with_capacity(frames.len() * l * d);
    for f in frames {
        if f.dim() != (l, d) {
            return Err(Error::dim("frame blocks differ in shape"));
        }
        data.extend(f.iter().copied());
    }
    Ok(Tensor::from_vec(data, (frames.len(), l, d), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn rows_tensor(rows: &[&[f32]], dtype: DType) -> Result<Tensor> {
    let d = rows.first().map(|r| r.len()).ok_or_else(|| Error::dim("empty batch"))?;
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        if r.len() != d {
            return Err(Error::dim("rows differ in length"));
        }
        data.extend_from_slice(r);
    }
    Ok(Tensor::from_vec(data, (rows.len(), d), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn tensor_to_array(t: &Tensor) -> Result<Array2<f32>> {
    let (n, d) = t.dims2()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Array2::from_shape_vec((n, d), v).map_err(|e| Error::dim(e.to_string()))
}

const EVAL_CHUNK: usize = 64;

impl Teacher {
    /// Video embeddings of the given clips, in order.
    pub fn embed_videos(&self, ds: &Dataset, idx: &[usize]) -> Result<Array2<f32>> {
        let mut parts = Vec::new();
        for chunk in idx.chunks(EVAL_CHUNK) {
            let frames: Vec<&Array2<f32>> = chunk.iter().map(|&i| &ds.clips[i].frame_features).collect();
            parts.push(tensor_to_array(&self.encode_video(&frames_tensor(&frames, DType::F32)?)?)?);
        }
        concat_rows(parts, self.embed_dim())
    }

    /// Text embeddings of raw text features.
    pub fn embed_text_features(&self, features: &[&[f32]]) -> Result<Array2<f32>> {
        let mut parts = Vec::new();
        for chunk in features.chunks(EVAL_CHUNK) {
            parts.push(tensor_to_array(&self.encode_text(&rows_tensor(chunk, DType::F32)?)?)?);
        }
        concat_rows(parts, self.embed_dim())
    }

    pub fn embed_texts(&self, ds: &Dataset, idx: &[usize]) -> Result<Array2<f32>> {
        let rows: Vec<&[f32]> = idx
            .iter()
            .map(|&i| ds.clips[i].text_feature.as_slice().expect("contiguous"))
            .collect();
        self.embed_text_features(&rows)
    }
}

pub fn concat_rows(parts: Vec<Array2<f32>>, d: usize) -> Result<Array2<f32>> {
    if parts.is_empty() {
        return Ok(Array2::zeros((0, d)));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::dim(e.to_string()))
}

pub struct TeacherRun {
    pub teacher: Teacher,
    pub store: ParamStore,
    pub log: StepLog,
}

/// Trains a fresh teacher on the train split.
///
/// When `mirror` is set, every directional clip in a batch is paired with its
/// mirrored clip (flipped frames, swapped caption) for the hinge term.
pub fn train_teacher(
    ds: &Dataset,
    cfg: &TeacherConfig,
    loss: &LossConfig,
    mirror: bool,
    rng: &mut Rng,
) -> Result<TeacherRun> {
    loss.validate()?;
    let arch = TeacherArch {
        config: cfg.clone(),
        frames: ds.config.features.frames,
        feature_dim: ds.config.features.dim,
    };
    let mut store = ParamStore::new(DType::F32);
    let teacher = Teacher::new(&arch, &mut store, rng)?;
    let train = ds.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Config("teacher training needs a non-empty train split".into()));
    }
    let use_mirror = mirror && loss.lambda_mc > 0.0;
    let mirrored: Vec<Option<_>> = ds
        .clips
        .iter()
        .map(|c| {
            if use_mirror && c.split == Split::Train && c.is_directional() {
                ds.mirror(c).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;
    if use_mirror && mirrored.iter().all(Option::is_none) {
        warn!("no directional training clips; mirror term skipped");
    }
    let mut trainer = Trainer::new(store.vars(), &cfg.optim, cfg.steps)?;
    let mut log = StepLog::new(&["loss", "contrastive", "mirror", "lr"]);
    for step in 0..cfg.steps {
        let batch = sample_batch(&train, cfg.batch_size, rng);
        let frames: Vec<&Array2<f32>> = batch.iter().map(|&i| &ds.clips[i].frame_features).collect();
        let texts: Vec<&[f32]> = batch
            .iter()
            .map(|&i| ds.clips[i].text_feature.as_slice().expect("contiguous"))
            .collect();
        let v = teacher.encode_video(&frames_tensor(&frames, DType::F32)?)?;
        let t = teacher.encode_text(&rows_tensor(&texts, DType::F32)?)?;
        let con = info_nce_symmetric(&v, &t, loss.tau)?;
        let dir_rows: Vec<usize> = (0..batch.len()).filter(|&r| mirrored[batch[r]].is_some()).collect();
        let mc = if dir_rows.is_empty() {
            Tensor::zeros((), DType::F32, &Device::Cpu)?
        } else {
            let m_frames: Vec<&Array2<f32>> = dir_rows
                .iter()
                .map(|&r| &mirrored[batch[r]].as_ref().unwrap().frame_features)
                .collect();
            let m_texts: Vec<&[f32]> = dir_rows
                .iter()
                .map(|&r| mirrored[batch[r]].as_ref().unwrap().text_feature.as_slice().unwrap())
                .collect();
            let v_m = teacher.encode_video(&frames_tensor(&m_frames, DType::F32)?)?;
            let t_m = teacher.encode_text(&rows_tensor(&m_texts, DType::F32)?)?;
            let rows = Tensor::new(dir_rows.iter().map(|&r| r as u32).collect::<Vec<_>>(), &Device::Cpu)?;
            let per = mirror_hinge_bidirectional(
                &v.index_select(&rows, 0)?,
                &t.index_select(&rows, 0)?,
                &v_m,
                &t_m,
                loss.margin,
            )?;
            per.mean(D::Minus1)?
        };
        let total = teacher_total(&con, &mc, if use_mirror { loss.lambda_mc } else { 0.0 })?;
        let lr = trainer.step(&total)?;
        let (l_total, l_con, l_mc) = (scalar(&total)?, scalar(&con)?, scalar(&mc)?);
        log.push(step, vec![l_total, l_con, l_mc, lr]);
        if step % 50 == 0 || step + 1 == cfg.steps {
            info!("teacher step {step}: loss {l_total:.4} (con {l_con:.4}, mc {l_mc:.4})");
        }
    }
    Ok(TeacherRun { teacher, store, log })
}
