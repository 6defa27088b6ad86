//! Pipeline configuration: every tunable for the model, training stages, and
//! decoding thresholds. Unknown keys are rejected on load and a stable hash
//! of the effective config is stored in checkpoints.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Single seed for all randomness: init, masking, data order.
    pub seed: u64,
    /// Entity categories; index order defines class ids.
    pub categories: Vec<String>,
    pub backbone: BackboneConfig,
    pub grid: GridConfig,
    pub spot: SpotConfig,
    pub mim: MimConfig,
    pub etd: EtdConfig,
    pub wtb: WtbConfig,
    pub group: GroupConfig,
    pub sem: SemConfig,
    pub mlm: MlmConfig,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            categories: vec![
                "header".into(),
                "key".into(),
                "value".into(),
                "other".into(),
            ],
            backbone: Default::default(),
            grid: Default::default(),
            spot: Default::default(),
            mim: Default::default(),
            etd: Default::default(),
            wtb: Default::default(),
            group: Default::default(),
            sem: Default::default(),
            mlm: Default::default(),
            train: Default::default(),
        }
    }
}

/// Convolution stack producing the stride-8 feature map F.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Output channels of the three stride-2 stages; the last entry is the
    /// channel count of F.
    pub channels: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: vec![32, 64, 256],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleKind {
    Bilinear,
    Nearest,
}

/// Grid encoder over the rasterized character grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub patch_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub mlp: usize,
    pub upsample: UpsampleKind,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            patch_size: 32,
            layers: 3,
            heads: 8,
            hidden: 256,
            mlp: 1024,
            upsample: UpsampleKind::Bilinear,
        }
    }
}

/// Word spotter heads and decoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpotConfig {
    /// Maximum number of center proposals.
    pub k: usize,
    /// Inference confidence threshold.
    pub conf_threshold: f64,
    /// Points sampled along the straight center line of each word.
    pub points: usize,
    /// Hidden channels of the center/geometry heads.
    pub head_channels: usize,
    /// Hidden width of the recognition decoder.
    pub rec_hidden: usize,
    pub lambda_geo: f64,
    pub lambda_rec: f64,
}

impl Default for SpotConfig {
    fn default() -> Self {
        SpotConfig {
            k: 100,
            conf_threshold: 0.3,
            points: 8,
            head_channels: 64,
            rec_hidden: 256,
            lambda_geo: 1.0,
            lambda_rec: 1.0,
        }
    }
}

/// Masked image modeling pre-training head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MimConfig {
    /// Character-level masking ratio.
    pub ratio_char: f64,
    /// Word-level masking ratio.
    pub ratio_word: f64,
    /// Intensity quantization bins for the reconstruction target.
    pub bins: usize,
    /// Channels of the two intermediate stride-2 deconvolution stages.
    pub deconv_channels: [usize; 2],
}

impl Default for MimConfig {
    fn default() -> Self {
        MimConfig {
            ratio_char: 0.30,
            ratio_word: 0.15,
            bins: 256,
            deconv_channels: [128, 64],
        }
    }
}

/// Entity detection heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EtdConfig {
    pub lambda_size_pretrain: f64,
    pub lambda_size_finetune: f64,
    pub top_n: usize,
    pub score_threshold: f64,
    pub head_channels: usize,
    pub focal_alpha: f64,
    pub focal_beta: f64,
}

impl Default for EtdConfig {
    fn default() -> Self {
        EtdConfig {
            lambda_size_pretrain: 0.2,
            lambda_size_finetune: 1.0,
            top_n: 100,
            score_threshold: 0.25,
            head_channels: 64,
            focal_alpha: 2.0,
            focal_beta: 4.0,
        }
    }
}

/// Word-to-entity relation head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WtbConfig {
    /// Representation channels (word/entity feature width).
    pub channels: usize,
    /// Hidden channels of the branch convs.
    pub head_channels: usize,
}

impl Default for WtbConfig {
    fn default() -> Self {
        WtbConfig {
            channels: 64,
            head_channels: 64,
        }
    }
}

/// Inference-time word grouping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupConfig {
    /// Minimum word-area-normalized overlap for assignment.
    pub iou_threshold: f64,
}

impl Default for GroupConfig {
    fn default() -> Self {
        GroupConfig { iou_threshold: 0.4 }
    }
}

/// Semantic encoder over the multimodal token sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub mlp: usize,
    pub max_len: usize,
    /// Coordinates are quantized to `0..=pos_buckets`.
    pub pos_buckets: usize,
}

impl Default for SemConfig {
    fn default() -> Self {
        SemConfig {
            layers: 6,
            heads: 4,
            hidden: 256,
            mlp: 1024,
            max_len: 1024,
            pos_buckets: 1000,
        }
    }
}

/// Masked language modeling corruption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlmConfig {
    /// Fraction of words selected; must equal `mim.ratio_word` because the
    /// MLM selection is exactly the word-masking plan.
    pub ratio: f64,
    /// Mask / random / keep proportions.
    pub split: [f64; 3],
}

impl Default for MlmConfig {
    fn default() -> Self {
        MlmConfig {
            ratio: 0.15,
            split: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub batch_size: usize,
    pub threads: usize,
    pub lambda_tag: f64,
    /// Fine-tuning learning rate decays once (x0.1) at this fraction of the
    /// step budget.
    pub finetune_decay_frac: f64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            pretrain_steps: 5000,
            finetune_steps: 2000,
            batch_size: 4,
            threads: 2,
            lambda_tag: 10.0,
            finetune_decay_frac: 2.0 / 3.0,
            log_every: 50,
        }
    }
}

impl PipelineConfig {
    /// Smaller channel widths for desk-scale training runs; the
    /// paper-pinned transformer shapes are untouched.
    pub fn desk() -> Self {
        let mut c = PipelineConfig::default();
        c.backbone.channels = vec![16, 32, 48];
        c.spot.head_channels = 32;
        c.spot.rec_hidden = 128;
        c.etd.head_channels = 32;
        c.wtb.head_channels = 32;
        c.mim.deconv_channels = [64, 32];
        c.mim.bins = 64;
        c
    }

    /// Channel count of the backbone feature map F.
    pub fn f_channels(&self) -> usize {
        *self.backbone.channels.last().expect("non-empty backbone")
    }

    pub fn category_id(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == name)
    }

    pub fn validate(&self) -> Result<()> {
        fn check(cond: bool, msg: &str) -> Result<()> {
            if cond {
                Ok(())
            } else {
                Err(Error::InvalidConfig(msg.to_string()))
            }
        }
        check(!self.categories.is_empty(), "categories must be non-empty")?;
        check(!self.backbone.channels.is_empty(), "backbone needs stages")?;
        check(
            self.backbone.channels.len() == 3,
            "backbone must have three stride-2 stages (stride 8)",
        )?;
        check(self.grid.hidden % self.grid.heads == 0, "grid.heads must divide grid.hidden")?;
        check(self.sem.hidden % self.sem.heads == 0, "sem.heads must divide sem.hidden")?;
        check(self.grid.patch_size % 8 == 0, "grid.patch_size must be a multiple of 8")?;
        check(self.spot.k > 0, "spot.k must be positive")?;
        check(
            (0.0..=1.0).contains(&self.spot.conf_threshold),
            "spot.conf_threshold must be in [0,1]",
        )?;
        check(self.spot.points >= 2, "spot.points must be at least 2")?;
        check(
            self.mim.ratio_char > 0.0 && self.mim.ratio_char < 1.0,
            "mim.ratio_char must be in (0,1)",
        )?;
        check(
            self.mim.ratio_word > 0.0 && self.mim.ratio_word < 1.0,
            "mim.ratio_word must be in (0,1)",
        )?;
        check(self.mim.bins >= 2, "mim.bins must be at least 2")?;
        check(
            (self.mlm.ratio - self.mim.ratio_word).abs() < 1e-12,
            "mlm.ratio must equal mim.ratio_word (the selections are shared)",
        )?;
        check(
            (self.mlm.split.iter().sum::<f64>() - 1.0).abs() < 1e-9,
            "mlm.split must sum to 1",
        )?;
        check(
            self.group.iou_threshold > 0.0 && self.group.iou_threshold <= 1.0,
            "group.iou_threshold must be in (0,1]",
        )?;
        check(self.etd.top_n > 0, "etd.top_n must be positive")?;
        check(self.train.batch_size > 0, "train.batch_size must be positive")?;
        check(self.train.threads > 0, "train.threads must be positive")?;
        check(self.sem.max_len > 0, "sem.max_len must be positive")?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Stable 64-bit hash of the effective configuration.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        fnv1a64(json.as_bytes())
    }
}

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_carry_pinned_values() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!(c.grid.patch_size, 32);
        assert_eq!(c.grid.layers, 3);
        assert_eq!(c.grid.heads, 8);
        assert_eq!(c.grid.hidden, 256);
        assert_eq!(c.grid.mlp, 1024);
        assert_eq!(c.spot.k, 100);
        assert_eq!(c.spot.conf_threshold, 0.3);
        assert_eq!(c.mim.ratio_char, 0.30);
        assert_eq!(c.mim.ratio_word, 0.15);
        assert_eq!(c.etd.lambda_size_pretrain, 0.2);
        assert_eq!(c.etd.lambda_size_finetune, 1.0);
        assert_eq!(c.group.iou_threshold, 0.4);
        assert_eq!(c.sem.layers, 6);
        assert_eq!(c.sem.heads, 4);
        assert_eq!(c.sem.hidden, 256);
        assert_eq!(c.mlm.ratio, 0.15);
        assert_eq!(c.mlm.split, [0.8, 0.1, 0.1]);
        assert_eq!(c.train.lambda_tag, 10.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = PipelineConfig::from_toml_str("nonsense_key = 1").unwrap_err();
        assert!(err.to_string().contains("invalid config"), "{err}");
    }

    #[test]
    fn partial_override_keeps_defaults() {
        let c = PipelineConfig::from_toml_str("[spot]\nk = 17\n").unwrap();
        assert_eq!(c.spot.k, 17);
        assert_eq!(c.spot.conf_threshold, 0.3);
    }

    #[test]
    fn hash_changes_with_content() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.spot.k = 99;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), PipelineConfig::default().hash());
    }

    #[test]
    fn mismatched_mlm_ratio_is_rejected() {
        let err = PipelineConfig::from_toml_str("[mlm]\nratio = 0.5\n").unwrap_err();
        assert!(err.to_string().contains("mlm.ratio"), "{err}");
    }
}
