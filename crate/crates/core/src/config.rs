//! Run configuration: one TOML file holding every module's settings.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{DecodeConfig, DecoderConfig, PrefixConfig};
use crate::objectives::LossConfig;
use crate::seed::sha256_hex;
use crate::student::StudentConfig;
use crate::synth::DatasetConfig;
use crate::teacher::TeacherConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "s1")]
    S1,
    #[serde(rename = "s2_1")]
    S2_1,
    #[serde(rename = "s2_2")]
    S2_2,
    #[serde(rename = "s3")]
    S3,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::S1, Stage::S2_1, Stage::S2_2, Stage::S3];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::S1 => "s1",
            Stage::S2_1 => "s2_1",
            Stage::S2_2 => "s2_2",
            Stage::S3 => "s3",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown stage '{s}' (expected s1, s2_1, s2_2 or s3)")))
    }
}

/// Parses a comma-separated stage list, sorted and deduplicated.
pub fn parse_stages(list: &str) -> Result<Vec<Stage>> {
    let mut out = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(Stage::from_str)
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

/// Where the mirror-consistency terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MirrorMode {
    Off,
    Teacher,
    Full,
}

impl MirrorMode {
    pub fn teacher(self) -> bool {
        self != MirrorMode::Off
    }

    pub fn student(self) -> bool {
        self == MirrorMode::Full
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MirrorMode::Off => "off",
            MirrorMode::Teacher => "teacher",
            MirrorMode::Full => "full",
        }
    }
}

impl FromStr for MirrorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(MirrorMode::Off),
            "teacher" => Ok(MirrorMode::Teacher),
            "full" => Ok(MirrorMode::Full),
            other => Err(Error::Config(format!("unknown mirror mode '{other}' (off, teacher, full)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// `train`, `val`, `test` or `held_out` (val and test together).
    pub split: String,
    /// Clips used by the Stage-3 overfit check.
    pub overfit_clips: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { split: "held_out".into(), overfit_clips: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub stage_arms: bool,
    pub mirror_arms: bool,
    pub baseline: bool,
    /// Extra full-pipeline arms with these prefix lengths.
    pub prefix_lens: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { stage_arms: true, mirror_arms: true, baseline: false, prefix_lens: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub stages: Vec<Stage>,
    pub mirror: MirrorMode,
    pub dataset: DatasetConfig,
    pub loss: LossConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub decoder: DecoderConfig,
    pub prefix: PrefixConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            stages: Stage::ALL.to_vec(),
            mirror: MirrorMode::Full,
            dataset: DatasetConfig::default(),
            loss: LossConfig::default(),
            teacher: TeacherConfig::default(),
            student: StudentConfig::default(),
            decoder: DecoderConfig::default(),
            prefix: PrefixConfig::default(),
            decode: DecodeConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Toml(t) => Error::Format { path: path.to_path_buf(), msg: t.to_string() },
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.loss.validate()?;
        for (name, o) in [
            ("teacher", &self.teacher.optim),
            ("student", &self.student.optim),
            ("decoder", &self.decoder.optim),
            ("prefix", &self.prefix.optim),
        ] {
            o.validate().map_err(|e| Error::Config(format!("{name}.optim: {e}")))?;
        }
        if self.decoder.d_model % self.decoder.heads != 0 {
            return Err(Error::Config("decoder.d_model must divide evenly into heads".into()));
        }
        if self.decode.beam_width == 0 {
            return Err(Error::Config("decode.beam_width must be at least 1".into()));
        }
        if !["train", "val", "test", "held_out"].contains(&self.eval.split.as_str()) {
            return Err(Error::Config(format!("unknown eval split '{}'", self.eval.split)));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn partial_files_fill_defaults_and_unknown_keys_fail() {
        let cfg = RunConfig::from_toml("seed = 3\nmirror = \"teacher\"\n[dataset]\nclasses = 4\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.mirror, MirrorMode::Teacher);
        assert_eq!(cfg.dataset.classes, 4);
        assert_eq!(cfg.dataset.clips_per_class, 16);
        assert_ne!(cfg.hash(), RunConfig::default().hash());
        assert!(RunConfig::from_toml("sed = 3\n").is_err());
        assert!(RunConfig::from_toml("[teacher]\nlayerz = 1\n").is_err());
        assert!(RunConfig::from_toml("[eval]\nsplit = \"dev\"\n").is_err());
    }

    #[test]
    fn stage_lists() {
        assert_eq!(parse_stages("s3,s2_2").unwrap(), vec![Stage::S2_2, Stage::S3]);
        assert_eq!(parse_stages("s1, s1,s2_1").unwrap(), vec![Stage::S1, Stage::S2_1]);
        assert!(parse_stages("s4").is_err());
        assert!("none".parse::<MirrorMode>().is_err());
        assert!(!MirrorMode::Teacher.student() && MirrorMode::Teacher.teacher());
    }
}
