//! CSI student: dual convolutional backbones over amplitude and phase, gated
//! fusion, projection into the shared space, and receiver pooling.

use candle_core::{DType, Device, Tensor, D};
use log::info;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{l2_normalize, scalar, Init, Linear, ParamStore};
use crate::objectives::{info_nce_symmetric, mirror_hinge_text_only, teacher_total, LossConfig};
use crate::optim::{sample_batch, OptimConfig, StepLog, Trainer};
use crate::seed::Rng;
use crate::synth::{ClipRecord, Dataset, Split};
use crate::teacher::{concat_rows, tensor_to_array, Teacher};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    Learned,
    /// Every gate entry pinned to this value.
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    /// Output channels of the four stride-2 blocks; the last is d_c.
    pub channels: Vec<usize>,
    pub gate: GateMode,
    pub align_steps: usize,
    pub text_steps: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            channels: vec![8, 16, 32, 64],
            gate: GateMode::Learned,
            align_steps: 300,
            text_steps: 300,
            batch_size: 16,
            optim: OptimConfig::with_lr(1e-3),
        }
    }
}

/// Architecture plus the input standardization fitted on the train split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentArch {
    pub config: StudentConfig,
    pub embed_dim: usize,
    pub antennas: usize,
    pub amp_mean: f64,
    pub amp_std: f64,
}

impl StudentArch {
    pub fn fused_dim(&self) -> usize {
        *self.config.channels.last().expect("validated non-empty")
    }
}

const KERNEL: usize = 4;

/// Stack of stride-2 convolutions with ReLU and global average pooling.
pub struct CsiBackbone {
    convs: Vec<(Tensor, Tensor)>,
}

impl CsiBackbone {
    pub fn new(store: &mut ParamStore, name: &str, in_ch: usize, channels: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut convs = Vec::with_capacity(channels.len());
        let mut c_in = in_ch;
        for (i, &c_out) in channels.iter().enumerate() {
            let fan_in = c_in * KERNEL * KERNEL;
            let w = store.get_or_init(
                &format!("{name}.conv{i}.weight"),
                &[c_out, c_in, KERNEL, KERNEL],
                Init::Normal((2.0 / fan_in as f64).sqrt()),
                rng,
            )?;
            let b = store.get_or_init(&format!("{name}.conv{i}.bias"), &[c_out], Init::Zeros, rng)?;
            convs.push((w, b));
            c_in = c_out;
        }
        Ok(Self { convs })
    }

    /// `(V, C, H, W)` to `(V, d_c)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (w, b) in &self.convs {
            let (_, _, hh, ww) = h.dims4()?;
            // stride-2 backward needs even spatial extents
            if hh % 2 == 1 {
                h = h.pad_with_zeros(2, 0, 1)?;
            }
            if ww % 2 == 1 {
                h = h.pad_with_zeros(3, 0, 1)?;
            }
            let c_out = b.dims1()?;
            h = h.conv2d(w, 1, 2, 1, 1)?.broadcast_add(&b.reshape((1, c_out, 1, 1))?)?.relu()?;
        }
        Ok(h.mean(D::Minus1)?.mean(D::Minus1)?)
    }
}

/// `g = σ(W[a;p] + b)`, `f = g⊙a + (1−g)⊙p`.
pub struct GatedFusion {
    gate: Linear,
    mode: GateMode,
}

impl GatedFusion {
    pub fn new(gate: Linear, mode: GateMode) -> Self {
        Self { gate, mode }
    }

    pub fn gate(&self, a: &Tensor, p: &Tensor) -> Result<Tensor> {
        match self.mode {
            GateMode::Learned => {
                let u = Tensor::cat(&[a, p], D::Minus1)?;
                Ok(candle_nn::ops::sigmoid(&self.gate.forward(&u)?)?)
            }
            GateMode::Fixed(g) => Ok((a.ones_like()? * g)?),
        }
    }

    pub fn forward(&self, a: &Tensor, p: &Tensor) -> Result<Tensor> {
        if a.dims() != p.dims() {
            return Err(Error::dim(format!("fusion inputs differ: {:?} vs {:?}", a.dims(), p.dims())));
        }
        let g = self.gate(a, p)?;
        Ok(((&g * a)? + ((1.0 - &g)? * p)?)?)
    }
}

/// Averages the valid rows of `views` (`(R, d)`) and renormalizes.
pub fn pool_receivers(views: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let (r, _) = views.dims2()?;
    if r != mask.len() {
        return Err(Error::dim(format!("{r} views but {} mask entries", mask.len())));
    }
    let valid: Vec<u32> = (0..r as u32).filter(|&i| mask[i as usize]).collect();
    if valid.is_empty() {
        return Err(Error::domain("no valid receiver view"));
    }
    let picked = views.index_select(&Tensor::new(valid.as_slice(), views.device())?, 0)?;
    l2_normalize(&picked.mean_keepdim(0)?, "pooled receiver views")?.squeeze(0).map_err(Into::into)
}

/// Standardized inputs for a set of clips: valid views stacked, plus the
/// `(B, V)` averaging matrix that pools them per clip.
pub struct StudentBatch {
    pub amplitude: Tensor,
    pub phase: Tensor,
    pub pool: Tensor,
}

pub struct Student {
    arch: StudentArch,
    amp: CsiBackbone,
    pha: CsiBackbone,
    fusion: GatedFusion,
    proj: Linear,
}

impl Student {
    pub fn new(arch: &StudentArch, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        let cfg = &arch.config;
        if cfg.channels.is_empty() {
            return Err(Error::Config("student needs at least one conv block".into()));
        }
        if let GateMode::Fixed(g) = cfg.gate {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::Config(format!("fixed gate {g} outside [0, 1]")));
            }
        }
        let dc = arch.fused_dim();
        let amp = CsiBackbone::new(store, "student.amp", arch.antennas, &cfg.channels, rng)?;
        let pha = CsiBackbone::new(store, "student.pha", arch.antennas, &cfg.channels, rng)?;
        let gate = Linear::new(store, "student.gate", 2 * dc, dc, true, rng)?;
        let proj = Linear::new(store, "student.proj", dc, arch.embed_dim, true, rng)?;
        Ok(Self {
            arch: arch.clone(),
            amp,
            pha,
            fusion: GatedFusion::new(gate, cfg.gate),
            proj,
        })
    }

    pub fn arch(&self) -> &StudentArch {
        &self.arch
    }

    pub fn set_gate_mode(&mut self, mode: GateMode) {
        self.fusion.mode = mode;
    }

    pub fn fusion(&self) -> &GatedFusion {
        &self.fusion
    }

    /// Pre-normalization fused feature `f` per view.
    pub fn fused(&self, amplitude: &Tensor, phase: &Tensor) -> Result<Tensor> {
        if amplitude.dims() != phase.dims() {
            return Err(Error::dim(format!(
                "amplitude {:?} and phase {:?} differ",
                amplitude.dims(),
                phase.dims()
            )));
        }
        let (_, c, _, _) = amplitude.dims4()?;
        if c != self.arch.antennas {
            return Err(Error::dim(format!("expected {} antenna channels, got {c}", self.arch.antennas)));
        }
        let a = self.amp.forward(amplitude)?;
        let p = self.pha.forward(phase)?;
        self.fusion.forward(&a, &p)
    }

    /// Per-view embeddings `c^(r)`, `(V, d)`.
    pub fn encode_views(&self, amplitude: &Tensor, phase: &Tensor) -> Result<Tensor> {
        l2_normalize(&self.proj.forward(&self.fused(amplitude, phase)?)?, "student view embedding")
    }

    /// Pooled clip embeddings `c̄`, `(B, d)`.
    pub fn encode_batch(&self, batch: &StudentBatch) -> Result<Tensor> {
        let views = self.encode_views(&batch.amplitude, &batch.phase)?;
        let pooled = batch.pool.to_dtype(views.dtype())?.matmul(&views)?;
        l2_normalize(&pooled, "pooled student embedding")
    }

    /// Builds standardized inputs for clips, dropping masked receivers.
    pub fn batch(&self, clips: &[&ClipRecord], dtype: DType) -> Result<StudentBatch> {
        let mut amp = Vec::new();
        let mut pha = Vec::new();
        let mut owners = Vec::new();
        let mut shape = None;
        for (b, clip) in clips.iter().enumerate() {
            for (view, &valid) in clip.csi.iter().zip(&clip.receiver_mask) {
                if !valid {
                    continue;
                }
                let (t, n_a, n_sc) = view.dims();
                if n_a != self.arch.antennas {
                    return Err(Error::dim(format!("clip {} has {n_a} antennas", clip.id)));
                }
                if *shape.get_or_insert((t, n_sc)) != (t, n_sc) {
                    return Err(Error::dim("CSI views differ in shape within a batch"));
                }
                // (T, N_a, N_sc) -> (N_a, T, N_sc)
                let a = view.amplitude.view().permuted_axes([1, 0, 2]);
                let p = view.phase.view().permuted_axes([1, 0, 2]);
                amp.extend(a.iter().map(|&x| ((x as f64 - self.arch.amp_mean) / self.arch.amp_std) as f32));
                pha.extend(p.iter().map(|&x| (x as f64 / std::f64::consts::PI) as f32));
                owners.push(b);
            }
        }
        if clips.iter().any(|c| !c.receiver_mask.iter().any(|&m| m)) {
            return Err(Error::domain("clip without any valid receiver"));
        }
        let (t, n_sc) = shape.ok_or_else(|| Error::dim("empty student batch"))?;
        let v = owners.len();
        let mut pool = vec![0f32; clips.len() * v];
        for b in 0..clips.len() {
            let n = owners.iter().filter(|&&o| o == b).count() as f32;
            for (j, &o) in owners.iter().enumerate() {
                if o == b {
                    pool[b * v + j] = 1.0 / n;
                }
            }
        }
        let dims = (v, self.arch.antennas, t, n_sc);
        Ok(StudentBatch {
            amplitude: Tensor::from_vec(amp, dims, &Device::Cpu)?.to_dtype(dtype)?,
            phase: Tensor::from_vec(pha, dims, &Device::Cpu)?.to_dtype(dtype)?,
            pool: Tensor::from_vec(pool, (clips.len(), v), &Device::Cpu)?.to_dtype(dtype)?,
        })
    }

    /// Pooled embeddings for dataset clips, in order.
    pub fn embed_clips(&self, ds: &Dataset, idx: &[usize]) -> Result<Array2<f32>> {
        let mut parts = Vec::new();
        for chunk in idx.chunks(32) {
            let clips: Vec<&ClipRecord> = chunk.iter().map(|&i| &ds.clips[i]).collect();
            let batch = self.batch(&clips, DType::F32)?;
            parts.push(tensor_to_array(&self.encode_batch(&batch)?)?);
        }
        concat_rows(parts, self.arch.embed_dim)
    }
}

/// Mean and std of valid-view amplitudes over the train split.
pub fn amplitude_stats(ds: &Dataset) -> (f64, f64) {
    let (mut n, mut sum, mut sq) = (0f64, 0f64, 0f64);
    for c in ds.clips.iter().filter(|c| c.split == Split::Train) {
        for (view, &valid) in c.csi.iter().zip(&c.receiver_mask) {
            if valid {
                for &x in view.amplitude.iter() {
                    let x = x as f64;
                    n += 1.0;
                    sum += x;
                    sq += x * x;
                }
            }
        }
    }
    let mean = sum / n.max(1.0);
    let var = (sq / n.max(1.0) - mean * mean).max(0.0);
    (mean, var.sqrt().max(1e-6))
}

pub fn student_arch(ds: &Dataset, cfg: &StudentConfig, embed_dim: usize) -> StudentArch {
    let (amp_mean, amp_std) = amplitude_stats(ds);
    StudentArch {
        config: cfg.clone(),
        embed_dim,
        antennas: ds.config.csi.antennas,
        amp_mean,
        amp_std,
    }
}

fn gather_rows(table: &Array2<f32>, rows: &[usize]) -> Result<Tensor> {
    let d = table.ncols();
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend(table.row(r).iter().copied());
    }
    Ok(Tensor::from_vec(data, (rows.len(), d), &Device::Cpu)?)
}

pub struct StudentRun {
    pub log: StepLog,
}

fn run_loop(
    student: &Student,
    store: &ParamStore,
    ds: &Dataset,
    cfg: &StudentConfig,
    steps: usize,
    rng: &mut Rng,
    stage: &str,
    mut loss_fn: impl FnMut(&Tensor, &[usize]) -> Result<(Tensor, Vec<f64>)>,
    columns: &[&str],
) -> Result<StepLog> {
    let train = ds.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Config("student training needs a non-empty train split".into()));
    }
    let mut trainer = Trainer::new(store.vars(), &cfg.optim, steps)?;
    let mut cols = vec!["loss"];
    cols.extend_from_slice(columns);
    cols.push("lr");
    let mut log = StepLog::new(&cols);
    for step in 0..steps {
        let batch = sample_batch(&train, cfg.batch_size, rng);
        let clips: Vec<&ClipRecord> = batch.iter().map(|&i| &ds.clips[i]).collect();
        let c = student.encode_batch(&student.batch(&clips, DType::F32)?)?;
        let (loss, parts) = loss_fn(&c, &batch)?;
        let lr = trainer.step(&loss)?;
        let l = scalar(&loss)?;
        let mut row = vec![l];
        row.extend(parts);
        row.push(lr);
        log.push(step, row);
        if step % 50 == 0 || step + 1 == steps {
            info!("{stage} step {step}: loss {l:.4}");
        }
    }
    Ok(log)
}

/// Stage 2-1: aligns pooled CSI embeddings to cached teacher video embeddings.
pub fn train_align(
    student: &Student,
    store: &ParamStore,
    teacher: &Teacher,
    ds: &Dataset,
    loss: &LossConfig,
    rng: &mut Rng,
) -> Result<StudentRun> {
    if teacher.embed_dim() != student.arch.embed_dim {
        return Err(Error::dim(format!(
            "teacher dim {} differs from student dim {}",
            teacher.embed_dim(),
            student.arch.embed_dim
        )));
    }
    let all: Vec<usize> = (0..ds.clips.len()).collect();
    let v_cache = teacher.embed_videos(ds, &all)?;
    let cfg = &student.arch.config;
    let log = run_loop(
        student,
        store,
        ds,
        cfg,
        cfg.align_steps,
        rng,
        "s2_1",
        |c, batch| {
            let v = gather_rows(&v_cache, batch)?.to_dtype(c.dtype())?;
            let l = info_nce_symmetric(c, &v, loss.tau)?;
            Ok((l, vec![]))
        },
        &[],
    )?;
    Ok(StudentRun { log })
}

/// Teacher text embeddings of every clip's caption and of its mirror
/// (`None` rows for symmetric clips).
pub fn text_targets(teacher: &Teacher, ds: &Dataset) -> Result<(Array2<f32>, Array2<f32>, Vec<bool>)> {
    let all: Vec<usize> = (0..ds.clips.len()).collect();
    let t = teacher.embed_texts(ds, &all)?;
    let mut mirrored_feats = Vec::with_capacity(ds.clips.len());
    let mut directional = Vec::with_capacity(ds.clips.len());
    for c in &ds.clips {
        if c.is_directional() {
            let caption = crate::synth::mirror_caption(&c.caption, &ds.lexicon);
            mirrored_feats.push(ds.encoders.encode_text(&caption)?);
            directional.push(true);
        } else {
            mirrored_feats.push(c.text_feature.clone());
            directional.push(false);
        }
    }
    let refs: Vec<&[f32]> = mirrored_feats.iter().map(|f| f.as_slice().expect("contiguous")).collect();
    let t_m = teacher.embed_text_features(&refs)?;
    Ok((t, t_m, directional))
}

/// Stage 2-2: CSI–text contrastive training with the text-only mirror hinge.
pub fn train_text(
    student: &Student,
    store: &ParamStore,
    teacher: &Teacher,
    ds: &Dataset,
    loss: &LossConfig,
    mirror: bool,
    rng: &mut Rng,
) -> Result<StudentRun> {
    loss.validate()?;
    if teacher.embed_dim() != student.arch.embed_dim {
        return Err(Error::dim("teacher and student embedding dims differ"));
    }
    let (t_cache, tm_cache, directional) = text_targets(teacher, ds)?;
    let lambda = if mirror { loss.lambda_mc } else { 0.0 };
    let cfg = &student.arch.config;
    let log = run_loop(
        student,
        store,
        ds,
        cfg,
        cfg.text_steps,
        rng,
        "s2_2",
        |c, batch| {
            let t = gather_rows(&t_cache, batch)?.to_dtype(c.dtype())?;
            let con = info_nce_symmetric(c, &t, loss.tau)?;
            let dir_rows: Vec<usize> = (0..batch.len()).filter(|&r| directional[batch[r]]).collect();
            let mc = if lambda > 0.0 && !dir_rows.is_empty() {
                let idx = Tensor::new(dir_rows.iter().map(|&r| r as u32).collect::<Vec<_>>(), &Device::Cpu)?;
                let picked: Vec<usize> = dir_rows.iter().map(|&r| batch[r]).collect();
                let t_m = gather_rows(&tm_cache, &picked)?.to_dtype(c.dtype())?;
                mirror_hinge_text_only(&c.index_select(&idx, 0)?, &t.index_select(&idx, 0)?, &t_m, loss.margin)?
                    .mean(D::Minus1)?
            } else {
                Tensor::zeros((), c.dtype(), &Device::Cpu)?
            };
            let total = teacher_total(&con, &mc, lambda)?;
            Ok((total, vec![scalar(&con)?, scalar(&mc)?]))
        },
        &["contrastive", "mirror"],
    )?;
    Ok(StudentRun { log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::substream;

    fn tiny_arch(gate: GateMode) -> StudentArch {
        StudentArch {
            config: StudentConfig { channels: vec![4, 6], gate, ..StudentConfig::default() },
            embed_dim: 5,
            antennas: 2,
            amp_mean: 0.0,
            amp_std: 1.0,
        }
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = substream(seed, "r");
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        scalar(&(a - b).unwrap().abs().unwrap().max_all().unwrap()).unwrap()
    }

    #[test]
    fn fixed_gates_select_or_average_branches() {
        let mut store = ParamStore::new(DType::F64);
        let mut s = Student::new(&tiny_arch(GateMode::Fixed(1.0)), &mut store, &mut substream(1, "s")).unwrap();
        let amp = randn(&[3, 2, 9, 7], 2);
        let pha = randn(&[3, 2, 9, 7], 3);
        let a = s.amp.forward(&amp).unwrap();
        let p = s.pha.forward(&pha).unwrap();
        let only_amp = l2_normalize(&s.proj.forward(&a).unwrap(), "x").unwrap();
        assert!(max_diff(&s.encode_views(&amp, &pha).unwrap(), &only_amp) < 1e-12);
        s.set_gate_mode(GateMode::Fixed(0.5));
        let mean = ((&a + &p).unwrap() * 0.5).unwrap();
        assert!(max_diff(&s.fused(&amp, &pha).unwrap(), &mean) < 1e-12);
    }

    #[test]
    fn learned_gate_keeps_fusion_between_branches() {
        let mut store = ParamStore::new(DType::F64);
        let s = Student::new(&tiny_arch(GateMode::Learned), &mut store, &mut substream(1, "s")).unwrap();
        let a = randn(&[4, 6], 5);
        let p = randn(&[4, 6], 6);
        let g = s.fusion.gate(&a, &p).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(g.iter().all(|&x| x > 0.0 && x < 1.0));
        let f = s.fusion.forward(&a, &p).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let av = a.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let pv = p.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for i in 0..f.len() {
            assert!(f[i] >= av[i].min(pv[i]) - 1e-12 && f[i] <= av[i].max(pv[i]) + 1e-12);
        }
    }

    #[test]
    fn pooling_examples() {
        let one = randn(&[1, 4], 7);
        let one = l2_normalize(&one, "x").unwrap();
        let three = Tensor::cat(&[&one, &one, &one], 0).unwrap();
        assert!(max_diff(&pool_receivers(&three, &[true, true, true]).unwrap(), &one.squeeze(0).unwrap()) < 1e-12);
        let garbage = Tensor::cat(&[&one, &randn(&[2, 4], 8)], 0).unwrap();
        assert!(max_diff(&pool_receivers(&garbage, &[true, false, false]).unwrap(), &one.squeeze(0).unwrap()) < 1e-12);
        let anti = Tensor::cat(&[&one, &one.neg().unwrap()], 0).unwrap();
        assert!(matches!(pool_receivers(&anti, &[true, true]), Err(Error::DegenerateNorm { .. })));
        assert!(matches!(pool_receivers(&three, &[false, false, false]), Err(Error::Domain(_))));
    }

    #[test]
    fn rejects_wrong_antenna_count() {
        let mut store = ParamStore::new(DType::F64);
        let s = Student::new(&tiny_arch(GateMode::Learned), &mut store, &mut substream(1, "s")).unwrap();
        let x = randn(&[1, 3, 8, 8], 9);
        assert!(s.encode_views(&x, &x).is_err());
    }
}
