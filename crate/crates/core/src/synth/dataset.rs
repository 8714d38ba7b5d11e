//! Corpus generation, splits, clip mirroring and the on-disk layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::captions::{action_caption, is_directional, num_actions, Vocab};
use super::csi::{synth_csi, CsiConfig, CsiTensor};
use super::encoders::{FeatureConfig, SurrogateEncoders};
use super::latent::{Direction, LatentClip, NUM_POSITIONS};
use super::lexicon::{mirror_caption, MirrorLexicon};
use crate::error::{Error, Result};
use crate::seed::{sha256_hex, substream, substream_seed};
use crate::tensorio::ArrayRecord;

pub const SCHEMA_VERSION: u32 = 1;
pub const RECEIVERS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?} (train|val|test)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Random within each (class, direction) stratum.
    Stratified,
    /// Whole standing positions are held out.
    PositionHeldOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub classes: usize,
    /// Even for directional classes: half left, half right twins.
    pub clips_per_class: usize,
    pub receiver_mask_prob: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub split_mode: SplitMode,
    pub features: FeatureConfig,
    pub csi: CsiConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            clips_per_class: 16,
            receiver_mask_prob: 0.1,
            train_fraction: 0.7,
            val_fraction: 0.15,
            split_mode: SplitMode::Stratified,
            features: FeatureConfig::default(),
            csi: CsiConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > num_actions() {
            return Err(Error::Config(format!(
                "classes must be in 1..={}, got {}",
                num_actions(),
                self.classes
            )));
        }
        if self.clips_per_class < 2 || self.clips_per_class % 2 != 0 {
            return Err(Error::Config(format!(
                "clips_per_class must be even and >= 2, got {}",
                self.clips_per_class
            )));
        }
        if !(0.0..1.0).contains(&self.receiver_mask_prob) {
            return Err(Error::Config("receiver_mask_prob must be in [0, 1)".into()));
        }
        let (tr, va) = (self.train_fraction, self.val_fraction);
        if !(tr > 0.0 && va >= 0.0 && tr + va <= 1.0) {
            return Err(Error::Config(format!("invalid split fractions train {tr}, val {va}")));
        }
        self.features.validate()?;
        self.csi.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub id: String,
    pub latent: LatentClip,
    pub split: Split,
    /// Id of the opposite-direction twin, for directional clips.
    pub twin: Option<String>,
    pub caption: String,
    pub caption_tokens: Vec<u32>,
    /// `L × D`, unit rows.
    pub frame_features: Array2<f32>,
    pub text_feature: Array1<f32>,
    pub csi: Vec<CsiTensor>,
    pub receiver_mask: Vec<bool>,
}

impl ClipRecord {
    pub fn is_directional(&self) -> bool {
        self.latent.direction != Direction::None
    }
}

pub fn clip_id(class_id: usize, index: usize, direction: Direction) -> String {
    format!("c{class_id:02}_{index:03}_{}", direction.as_str())
}

/// Mirrored copy of a directional clip: frames re-encoded with the direction
/// toggled, caption and text feature swapped, CSI untouched.
pub fn mirror_clip(
    record: &ClipRecord,
    encoders: &SurrogateEncoders,
    lexicon: &MirrorLexicon,
    vocab: &Vocab,
) -> Result<ClipRecord> {
    if !record.is_directional() {
        return Err(Error::domain(format!("clip {} has no direction to mirror", record.id)));
    }
    let latent = record.latent.mirrored()?;
    let caption = mirror_caption(&record.caption, lexicon);
    Ok(ClipRecord {
        id: record.twin.clone().unwrap_or_else(|| format!("{}~mirror", record.id)),
        latent,
        split: record.split,
        twin: Some(record.id.clone()),
        caption_tokens: vocab.encode(&caption),
        frame_features: encoders.encode_frames(&latent)?,
        text_feature: encoders.encode_text(&caption)?,
        caption,
        csi: record.csi.clone(),
        receiver_mask: record.receiver_mask.clone(),
    })
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub seed: u64,
    pub lexicon: MirrorLexicon,
    pub vocab: Vocab,
    pub encoders: SurrogateEncoders,
    pub clips: Vec<ClipRecord>,
}

fn latents(cfg: &DatasetConfig, seed: u64, lexicon: &MirrorLexicon) -> Vec<(usize, LatentClip)> {
    let mut pos_rng = substream(seed, "positions");
    let mut out = Vec::new();
    for class_id in 0..cfg.classes {
        let directional = is_directional(class_id, lexicon);
        let count = if directional { cfg.clips_per_class / 2 } else { cfg.clips_per_class };
        for i in 0..count {
            let clip_seed = substream_seed(seed, &format!("clip/{class_id}/{i}"));
            let position_index = pos_rng.random_range(0..NUM_POSITIONS);
            let dirs: &[Direction] = if directional {
                &[Direction::Left, Direction::Right]
            } else {
                &[Direction::None]
            };
            for &direction in dirs {
                out.push((
                    i,
                    LatentClip {
                        class_id,
                        direction,
                        position_index,
                        seed: clip_seed,
                    },
                ));
            }
        }
    }
    out
}

fn receiver_mask(seed: u64, id: &str, prob: f64) -> Vec<bool> {
    let mut rng = substream(seed, &format!("mask/{id}"));
    let mut mask: Vec<bool> = (0..RECEIVERS).map(|_| rng.random::<f64>() >= prob).collect();
    if !mask.iter().any(|&m| m) {
        mask[rng.random_range(0..RECEIVERS)] = true;
    }
    mask
}

fn assign_splits(cfg: &DatasetConfig, seed: u64, clips: &[(usize, LatentClip)]) -> Vec<Split> {
    let mut splits = vec![Split::Train; clips.len()];
    let cut = |n: usize| {
        let n_train = ((cfg.train_fraction * n as f64).round() as usize).clamp(1.min(n), n);
        let n_val = ((cfg.val_fraction * n as f64).round() as usize).min(n - n_train);
        (n_train, n_val)
    };
    match cfg.split_mode {
        SplitMode::Stratified => {
            let mut strata: BTreeMap<(usize, Direction), Vec<usize>> = BTreeMap::new();
            for (i, (_, l)) in clips.iter().enumerate() {
                strata.entry((l.class_id, l.direction)).or_default().push(i);
            }
            for ((class_id, dir), mut members) in strata {
                let mut rng = substream(seed, &format!("split/{class_id}/{}", dir.as_str()));
                members.shuffle(&mut rng);
                let (n_train, n_val) = cut(members.len());
                for (rank, &i) in members.iter().enumerate() {
                    splits[i] = if rank < n_train {
                        Split::Train
                    } else if rank < n_train + n_val {
                        Split::Val
                    } else {
                        Split::Test
                    };
                }
            }
        }
        SplitMode::PositionHeldOut => {
            let mut positions: Vec<usize> = (0..NUM_POSITIONS).collect();
            positions.shuffle(&mut substream(seed, "split/positions"));
            let (n_train, n_val) = cut(NUM_POSITIONS);
            let mut by_pos = [Split::Train; NUM_POSITIONS];
            for (rank, &p) in positions.iter().enumerate() {
                by_pos[p] = if rank < n_train {
                    Split::Train
                } else if rank < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                };
            }
            for (i, (_, l)) in clips.iter().enumerate() {
                splits[i] = by_pos[l.position_index];
            }
        }
    }
    splits
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FileRef {
    file: String,
    sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClipEntry {
    id: String,
    class_id: usize,
    direction: Direction,
    position_index: usize,
    seed: u64,
    split: Split,
    twin: Option<String>,
    caption: String,
    receiver_mask: Vec<bool>,
    frames: FileRef,
    text: FileRef,
    amplitude: FileRef,
    phase: FileRef,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    seed: u64,
    config: DatasetConfig,
    encoder_checksum: String,
    lexicon: FileRef,
    vocab: Vec<String>,
    clips: Vec<ClipEntry>,
}

fn write_array(dir: &Path, rel: String, rec: &ArrayRecord) -> Result<FileRef> {
    let bytes = rec.encode()?;
    let path = dir.join(&rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, &bytes)?;
    Ok(FileRef {
        file: rel,
        sha256: sha256_hex(&bytes),
    })
}

fn read_verified(dir: &Path, r: &FileRef) -> Result<Vec<u8>> {
    let path = dir.join(&r.file);
    let bytes = fs::read(&path)?;
    let found = sha256_hex(&bytes);
    if found != r.sha256 {
        return Err(Error::Integrity {
            path,
            expected: r.sha256.clone(),
            found,
        });
    }
    Ok(bytes)
}

fn read_array(dir: &Path, r: &FileRef, dims: &[usize]) -> Result<Vec<f32>> {
    let bytes = read_verified(dir, r)?;
    let path = dir.join(&r.file);
    let rec = ArrayRecord::decode(&bytes).map_err(|msg| Error::Format { path: path.clone(), msg })?;
    if rec.dims != dims {
        return Err(Error::Format {
            path,
            msg: format!("dims {:?}, expected {dims:?}", rec.dims),
        });
    }
    Ok(rec.to_f32())
}

fn stack_csi(views: &[CsiTensor], amplitude: bool) -> Array4<f32> {
    let arrays: Vec<_> = views
        .iter()
        .map(|v| if amplitude { v.amplitude.view() } else { v.phase.view() })
        .collect();
    ndarray::stack(Axis(0), &arrays).expect("receiver views share a shape")
}

impl Dataset {
    pub fn generate(config: &DatasetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let lexicon = MirrorLexicon::default();
        let vocab = Vocab::from_bank(&lexicon);
        let encoders = SurrogateEncoders::new(seed, &config.features)?;
        let latents = latents(config, seed, &lexicon);
        let splits = assign_splits(config, seed, &latents);
        let (t, n_a, n_sc) = (config.csi.packets, config.csi.antennas, config.csi.subcarriers());
        let mut clips = Vec::with_capacity(latents.len());
        for ((index, latent), split) in latents.iter().zip(splits) {
            let id = clip_id(latent.class_id, *index, latent.direction);
            let twin = latent
                .mirrored()
                .ok()
                .map(|m| clip_id(m.class_id, *index, m.direction));
            let caption = action_caption(latent.class_id, latent.direction, &lexicon)?;
            let receiver_mask = receiver_mask(seed, &id, config.receiver_mask_prob);
            let mut csi = Vec::with_capacity(RECEIVERS);
            for (r, &valid) in receiver_mask.iter().enumerate() {
                csi.push(if valid {
                    synth_csi(latent, r, config.csi.noise, &config.csi)?
                } else {
                    CsiTensor {
                        receiver_id: r,
                        amplitude: Array3::zeros((t, n_a, n_sc)),
                        phase: Array3::zeros((t, n_a, n_sc)),
                    }
                });
            }
            clips.push(ClipRecord {
                id,
                latent: *latent,
                split,
                twin,
                caption_tokens: vocab.encode(&caption),
                frame_features: encoders.encode_frames(latent)?,
                text_feature: encoders.encode_text(&caption)?,
                caption,
                csi,
                receiver_mask,
            });
        }
        Ok(Self {
            config: config.clone(),
            seed,
            lexicon,
            vocab,
            encoders,
            clips,
        })
    }

    pub fn mirror(&self, record: &ClipRecord) -> Result<ClipRecord> {
        mirror_clip(record, &self.encoders, &self.lexicon, &self.vocab)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.clips.len()).filter(|&i| self.clips[i].split == split).collect()
    }

    /// Validation and test clips together.
    pub fn held_out_indices(&self) -> Vec<usize> {
        (0..self.clips.len())
            .filter(|&i| self.clips[i].split != Split::Train)
            .collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.clips.iter().position(|c| c.id == id)
    }

    /// Writes the manifest, lexicon and per-clip arrays; returns the dataset
    /// hash (SHA-256 of the manifest bytes).
    pub fn save(&self, dir: &Path) -> Result<String> {
        fs::create_dir_all(dir)?;
        let lex_bytes = self.lexicon.to_text().into_bytes();
        fs::write(dir.join("lexicon.txt"), &lex_bytes)?;
        let mut entries = Vec::with_capacity(self.clips.len());
        for c in &self.clips {
            let (l, d) = c.frame_features.dim();
            let frames = write_array(
                dir,
                format!("clips/{}.frames.w2ca", c.id),
                &ArrayRecord::f32(vec![l, d], c.frame_features.iter().copied().collect()),
            )?;
            let text = write_array(
                dir,
                format!("clips/{}.text.w2ca", c.id),
                &ArrayRecord::f32(vec![c.text_feature.len()], c.text_feature.to_vec()),
            )?;
            let amp = stack_csi(&c.csi, true);
            let pha = stack_csi(&c.csi, false);
            let amplitude = write_array(
                dir,
                format!("clips/{}.amplitude.w2ca", c.id),
                &ArrayRecord::f32(amp.shape().to_vec(), amp.iter().copied().collect()),
            )?;
            let phase = write_array(
                dir,
                format!("clips/{}.phase.w2ca", c.id),
                &ArrayRecord::f32(pha.shape().to_vec(), pha.iter().copied().collect()),
            )?;
            entries.push(ClipEntry {
                id: c.id.clone(),
                class_id: c.latent.class_id,
                direction: c.latent.direction,
                position_index: c.latent.position_index,
                seed: c.latent.seed,
                split: c.split,
                twin: c.twin.clone(),
                caption: c.caption.clone(),
                receiver_mask: c.receiver_mask.clone(),
                frames,
                text,
                amplitude,
                phase,
            });
        }
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            seed: self.seed,
            config: self.config.clone(),
            encoder_checksum: self.encoders.checksum(),
            lexicon: FileRef {
                file: "lexicon.txt".into(),
                sha256: sha256_hex(&lex_bytes),
            },
            vocab: self.vocab.clone().into(),
            clips: entries,
        };
        let bytes = serde_json::to_vec_pretty(&manifest)?;
        fs::write(dir.join("manifest.json"), &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    /// Hash of the manifest on disk, without loading arrays.
    pub fn hash_on_disk(dir: &Path) -> Result<String> {
        Ok(sha256_hex(&fs::read(dir.join("manifest.json"))?))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::Format {
                path: manifest_path,
                msg: format!("unsupported schema version {}", manifest.schema_version),
            });
        }
        let config = manifest.config;
        config.validate()?;
        let lex_text = String::from_utf8(read_verified(dir, &manifest.lexicon)?).map_err(|e| Error::Format {
            path: dir.join(&manifest.lexicon.file),
            msg: e.to_string(),
        })?;
        let lexicon = MirrorLexicon::parse(&lex_text)?;
        let vocab = Vocab::try_from(manifest.vocab)?;
        let encoders = SurrogateEncoders::new(manifest.seed, &config.features)?;
        if encoders.checksum() != manifest.encoder_checksum {
            return Err(Error::Integrity {
                path: manifest_path,
                expected: manifest.encoder_checksum,
                found: encoders.checksum(),
            });
        }
        let (l, d) = (config.features.frames, config.features.dim);
        let (t, n_a, n_sc) = (config.csi.packets, config.csi.antennas, config.csi.subcarriers());
        let mut clips = Vec::with_capacity(manifest.clips.len());
        for e in manifest.clips {
            let frames = Array2::from_shape_vec((l, d), read_array(dir, &e.frames, &[l, d])?)
                .map_err(|err| Error::dim(err.to_string()))?;
            let text = Array1::from(read_array(dir, &e.text, &[d])?);
            let csi_dims = [RECEIVERS, t, n_a, n_sc];
            let amp = Array4::from_shape_vec(csi_dims, read_array(dir, &e.amplitude, &csi_dims)?)
                .map_err(|err| Error::dim(err.to_string()))?;
            let pha = Array4::from_shape_vec(csi_dims, read_array(dir, &e.phase, &csi_dims)?)
                .map_err(|err| Error::dim(err.to_string()))?;
            let csi = (0..RECEIVERS)
                .map(|r| CsiTensor {
                    receiver_id: r,
                    amplitude: amp.index_axis(Axis(0), r).to_owned(),
                    phase: pha.index_axis(Axis(0), r).to_owned(),
                })
                .collect();
            clips.push(ClipRecord {
                id: e.id,
                latent: LatentClip {
                    class_id: e.class_id,
                    direction: e.direction,
                    position_index: e.position_index,
                    seed: e.seed,
                },
                split: e.split,
                twin: e.twin,
                caption_tokens: vocab.encode(&e.caption),
                caption: e.caption,
                frame_features: frames,
                text_feature: text,
                csi,
                receiver_mask: e.receiver_mask,
            });
        }
        Ok(Self {
            config,
            seed: manifest.seed,
            lexicon,
            vocab,
            encoders,
            clips,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> DatasetConfig {
        DatasetConfig {
            clips_per_class: 4,
            csi: CsiConfig {
                packets: 8,
                raw_subcarriers: 12,
                pruned: vec![3],
                ..CsiConfig::default()
            },
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn default_counts_and_split_arithmetic() {
        let cfg = DatasetConfig {
            csi: CsiConfig { packets: 4, ..CsiConfig::default() },
            ..DatasetConfig::default()
        };
        let ds = Dataset::generate(&cfg, 3).unwrap();
        assert_eq!(ds.clips.len(), 128);
        // directional strata of 8: 6/1/1, symmetric strata of 16: 11/2/3
        assert_eq!(ds.indices(Split::Train).len(), 6 * 2 * 6 + 2 * 11);
        assert_eq!(ds.indices(Split::Val).len(), 6 * 2 + 2 * 2);
        assert_eq!(ds.held_out_indices().len(), 128 - 94);
        for c in &ds.clips {
            assert!(c.receiver_mask.iter().any(|&m| m));
            assert_eq!(c.csi.len(), RECEIVERS);
            if let Some(t) = &c.twin {
                let other = &ds.clips[ds.index_of(t).unwrap()];
                assert_eq!(other.twin.as_deref(), Some(c.id.as_str()));
                assert_eq!(other.latent.position_index, c.latent.position_index);
            }
        }
    }

    #[test]
    fn mirror_clip_matches_twin_features() {
        let ds = Dataset::generate(&small_config(), 5).unwrap();
        let left = ds.clips.iter().find(|c| c.latent.direction == Direction::Left).unwrap();
        let right = &ds.clips[ds.index_of(left.twin.as_ref().unwrap()).unwrap()];
        let m = ds.mirror(left).unwrap();
        assert_eq!(m.frame_features, right.frame_features);
        assert_eq!(m.text_feature, right.text_feature);
        assert_eq!(m.caption, right.caption);
        assert_eq!(m.csi, left.csi);
        assert_eq!(ds.mirror(&m).unwrap(), *left);
        let sym = ds.clips.iter().find(|c| !c.is_directional()).unwrap();
        assert!(ds.mirror(sym).is_err());
    }

    #[test]
    fn save_load_roundtrip_and_byte_determinism() {
        let cfg = small_config();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ds = Dataset::generate(&cfg, 9).unwrap();
        let h1 = ds.save(a.path()).unwrap();
        let h2 = Dataset::generate(&cfg, 9).unwrap().save(b.path()).unwrap();
        assert_eq!(h1, h2);
        let back = Dataset::load(a.path()).unwrap();
        assert_eq!(back.clips, ds.clips);
        assert_eq!(Dataset::hash_on_disk(a.path()).unwrap(), h1);
    }

    #[test]
    fn load_detects_corrupted_arrays() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::generate(&small_config(), 11).unwrap();
        ds.save(dir.path()).unwrap();
        let path = dir.path().join(format!("clips/{}.text.w2ca", ds.clips[0].id));
        let mut bytes = fs::read(&path).unwrap();
        bytes[70] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Integrity { .. })));
    }

    #[test]
    fn position_holdout_keeps_positions_disjoint() {
        let cfg = DatasetConfig {
            split_mode: SplitMode::PositionHeldOut,
            ..small_config()
        };
        let ds = Dataset::generate(&cfg, 2).unwrap();
        let train: std::collections::BTreeSet<_> = ds
            .indices(Split::Train)
            .iter()
            .map(|&i| ds.clips[i].latent.position_index)
            .collect();
        for i in ds.held_out_indices() {
            assert!(!train.contains(&ds.clips[i].latent.position_index));
        }
    }

    #[test]
    fn rejects_invalid_configs() {
        assert!(DatasetConfig { classes: 0, ..DatasetConfig::default() }.validate().is_err());
        assert!(DatasetConfig { clips_per_class: 3, ..DatasetConfig::default() }.validate().is_err());
        assert!(DatasetConfig { train_fraction: 0.9, val_fraction: 0.2, ..DatasetConfig::default() }
            .validate()
            .is_err());
    }
}
