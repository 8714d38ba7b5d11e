//! Frozen surrogate frame and text encoders.
//!
//! Both are fixed, seeded linear maps over a structured latent followed by
//! unit normalization. Nothing here is ever trained.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::captions::{num_actions, tokenize};
use super::latent::{LatentClip, NUM_POSITIONS};
use crate::error::{Error, Result};
use crate::seed::{substream, substream_seed, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// Frames per clip (L).
    pub frames: usize,
    /// Feature width (D).
    pub dim: usize,
    pub class_weight: f64,
    pub direction_weight: f64,
    pub temporal_weight: f64,
    pub position_weight: f64,
    /// Shared component of every frame feature.
    pub frame_common_weight: f64,
    /// Shared component of every text feature.
    pub text_common_weight: f64,
    /// Per-frame Gaussian noise scale.
    pub noise: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            dim: 64,
            class_weight: 1.0,
            direction_weight: 0.1,
            temporal_weight: 0.3,
            position_weight: 0.3,
            frame_common_weight: 4.0,
            text_common_weight: 4.0,
            noise: 0.1,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.dim < 2 {
            return Err(Error::Config(format!(
                "feature dims must be positive (frames {}, dim {})",
                self.frames, self.dim
            )));
        }
        let weights = [
            self.class_weight,
            self.direction_weight,
            self.temporal_weight,
            self.position_weight,
            self.frame_common_weight,
            self.text_common_weight,
            self.noise,
        ];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("feature weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

fn gaussian_rows(rng: &mut Rng, rows: usize, dim: usize) -> Array2<f64> {
    let scale = 1.0 / (dim as f64).sqrt();
    Array2::from_shape_fn((rows, dim), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

fn normalize_f32(v: &Array1<f64>) -> Array1<f32> {
    let n = v.dot(v).sqrt();
    v.mapv(|x| (x / n) as f32)
}

/// Per-action motion rate in cycles per clip.
pub fn motion_cycles(class_id: usize) -> f64 {
    1.0 + (class_id % 4) as f64
}

/// Clip-level nuisance phase, shared by twins since it derives from the seed.
pub fn motion_phase(clip_seed: u64) -> f64 {
    let mut rng = Rng::seed_from_u64(substream_seed(clip_seed, "motion-phase"));
    rand::Rng::random_range(&mut rng, 0.0..std::f64::consts::TAU)
}

#[derive(Debug, Clone)]
pub struct SurrogateEncoders {
    cfg: FeatureConfig,
    seed: u64,
    class_basis: Array2<f64>,
    shared_direction: Array1<f64>,
    class_direction: Array2<f64>,
    temporal: Array2<f64>,
    position: Array2<f64>,
    frame_common: Array1<f64>,
    text_common: Array1<f64>,
}

impl SurrogateEncoders {
    pub fn new(seed: u64, cfg: &FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let mut rng = substream(seed, "encoders");
        let class_basis = gaussian_rows(&mut rng, num_actions(), d);
        let shared_direction = gaussian_rows(&mut rng, 1, d).row(0).to_owned();
        let class_direction = gaussian_rows(&mut rng, num_actions(), d);
        let temporal = gaussian_rows(&mut rng, 2, d);
        let position = gaussian_rows(&mut rng, NUM_POSITIONS, d);
        let frame_common = gaussian_rows(&mut rng, 1, d).row(0).to_owned();
        let text_common = gaussian_rows(&mut rng, 1, d).row(0).to_owned();
        Ok(Self {
            cfg: cfg.clone(),
            seed,
            class_basis,
            shared_direction,
            class_direction,
            temporal,
            position,
            frame_common,
            text_common,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    /// `L × D` unit-norm frame features for a latent.
    ///
    /// Noise depends on the clip seed only, so a clip and its twin differ
    /// exactly by the direction term.
    pub fn encode_frames(&self, latent: &LatentClip) -> Result<Array2<f32>> {
        let c = latent.class_id;
        if c >= num_actions() || latent.position_index >= NUM_POSITIONS {
            return Err(Error::domain(format!(
                "latent out of range: class {c}, position {}",
                latent.position_index
            )));
        }
        let cfg = &self.cfg;
        let d = cfg.dim;
        let mut noise_rng = Rng::seed_from_u64(substream_seed(latent.seed, "frame-noise"));
        let noise = gaussian_rows(&mut noise_rng, cfg.frames, d);
        let direction = (&self.shared_direction + &self.class_direction.row(c)) * (latent.direction.sign() / 2f64.sqrt());
        let base = &self.class_basis.row(c) * cfg.class_weight
            + direction * cfg.direction_weight
            + &self.position.row(latent.position_index) * cfg.position_weight
            + &self.frame_common * cfg.frame_common_weight;
        let cycles = motion_cycles(c);
        let phase0 = motion_phase(latent.seed);
        let mut out = Array2::<f32>::zeros((cfg.frames, d));
        for j in 0..cfg.frames {
            let angle = std::f64::consts::TAU * cycles * j as f64 / cfg.frames as f64 + phase0;
            let row = &base
                + &(&self.temporal.row(0) * (cfg.temporal_weight * angle.sin()))
                + &(&self.temporal.row(1) * (cfg.temporal_weight * angle.cos()))
                + &(&noise.row(j) * cfg.noise);
            out.row_mut(j).assign(&normalize_f32(&row));
        }
        Ok(out)
    }

    /// Seeded embedding of one word, independent of any vocabulary.
    pub fn word_vector(&self, word: &str) -> Array1<f64> {
        let mut rng = substream(self.seed, &format!("word/{word}"));
        gaussian_rows(&mut rng, 1, self.cfg.dim).row(0).to_owned()
    }

    /// `D`-dim unit-norm text feature of a caption.
    pub fn encode_text(&self, caption: &str) -> Result<Array1<f32>> {
        let words = tokenize(caption);
        if words.is_empty() {
            return Err(Error::domain("cannot encode an empty caption"));
        }
        let mut acc = Array1::<f64>::zeros(self.cfg.dim);
        for w in &words {
            acc += &self.word_vector(w);
        }
        acc /= (words.len() as f64).sqrt();
        acc += &(&self.text_common * self.cfg.text_common_weight);
        Ok(normalize_f32(&acc))
    }

    /// Digest of every fixed matrix plus config and seed.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(serde_json::to_vec(&self.cfg).expect("config serializes"));
        let mats = [&self.class_basis, &self.class_direction, &self.temporal, &self.position];
        for m in mats {
            for x in m.iter() {
                h.update(x.to_le_bytes());
            }
        }
        for v in [&self.shared_direction, &self.frame_common, &self.text_common] {
            for x in v.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Mean cosine between rows of two equally shaped feature blocks.
pub fn mean_row_cosine(a: &Array2<f32>, b: &Array2<f32>) -> f64 {
    let n = a.len_of(Axis(0)).max(1);
    a.outer_iter()
        .zip(b.outer_iter())
        .map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (*p as f64) * (*q as f64)).sum::<f64>())
        .sum::<f64>()
        / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::latent::Direction;

    fn latent(direction: Direction) -> LatentClip {
        LatentClip { class_id: 0, direction, position_index: 5, seed: 42 }
    }

    #[test]
    fn frames_are_unit_rows_and_deterministic() {
        let enc = SurrogateEncoders::new(1, &FeatureConfig::default()).unwrap();
        let f = enc.encode_frames(&latent(Direction::Left)).unwrap();
        assert_eq!(f.dim(), (8, 64));
        for row in f.outer_iter() {
            let n: f64 = row.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert_eq!(f, enc.encode_frames(&latent(Direction::Left)).unwrap());
    }

    #[test]
    fn twins_differ_but_stay_close() {
        let enc = SurrogateEncoders::new(1, &FeatureConfig::default()).unwrap();
        let l = enc.encode_frames(&latent(Direction::Left)).unwrap();
        let r = enc.encode_frames(&latent(Direction::Right)).unwrap();
        assert_ne!(l, r);
        let cos = mean_row_cosine(&l, &r);
        assert!(cos > 0.9 && cos < 0.9999, "cos {cos}");
    }

    #[test]
    fn mirrored_captions_embed_nearby() {
        let enc = SurrogateEncoders::new(1, &FeatureConfig::default()).unwrap();
        let a = enc.encode_text("a person is waving the left hand").unwrap();
        let b = enc.encode_text("a person is waving the right hand").unwrap();
        let c = enc.encode_text("a person is jumping in place").unwrap();
        let cos_ab: f32 = a.dot(&b);
        let cos_ac: f32 = a.dot(&c);
        assert!(cos_ab > 0.85 && cos_ab < 0.999, "{cos_ab}");
        assert!(cos_ac < cos_ab);
        assert!(enc.encode_text("  ").is_err());
    }

    #[test]
    fn checksum_depends_on_seed() {
        let cfg = FeatureConfig::default();
        let a = SurrogateEncoders::new(1, &cfg).unwrap();
        assert_eq!(a.checksum(), SurrogateEncoders::new(1, &cfg).unwrap().checksum());
        assert_ne!(a.checksum(), SurrogateEncoders::new(2, &cfg).unwrap().checksum());
    }
}
