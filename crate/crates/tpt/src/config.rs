//! Run configuration: one flat `key = value` text file (plus command-line
//! overrides) that fully determines a run together with its seeds.

use sha2::{Digest, Sha256};

use crate::data::{GeneratorConfig, DEFAULT_DIFFICULTY_LEVELS};
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::model::{LossConfig, PartGenerator};
use crate::regressor::{ExemplarFusion, FusionMode};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data: GeneratorConfig,
    pub decoder: DecoderConfig,
    pub part_generator: PartGenerator,
    /// Number of score-difference intervals B.
    pub groups: usize,
    pub fusion: FusionMode,
    pub loss: LossConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Learning rate for the embedding and decoder parameters.
    pub lr_backbone: f64,
    /// Learning rate for the regressor heads.
    pub lr_regressor: f64,
    /// Training/evaluation seed (the data seed lives in `data.seed`).
    pub seed: u64,
    /// Exemplars fused per test video at inference.
    pub exemplars: usize,
    pub exemplar_fusion: ExemplarFusion,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: GeneratorConfig::default(),
            decoder: DecoderConfig::default(),
            part_generator: PartGenerator::Tpt,
            groups: 4,
            fusion: FusionMode::PartWise,
            loss: LossConfig::default(),
            batch_size: 8,
            epochs: 30,
            lr_backbone: 1e-4,
            lr_regressor: 1e-3,
            seed: 123,
            exemplars: 10,
            exemplar_fusion: ExemplarFusion::Mean,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

impl RunConfig {
    /// Apply one `key = value` assignment.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data.clips_per_video" => self.data.clips_per_video = parse_num(key, value)?,
            "data.feature_dim" => self.data.feature_dim = parse_num(key, value)?,
            "data.phases" => self.data.phases = parse_num(key, value)?,
            "data.train_videos" => self.data.train_videos = parse_num(key, value)?,
            "data.val_videos" => self.data.val_videos = parse_num(key, value)?,
            "data.test_videos" => self.data.test_videos = parse_num(key, value)?,
            "data.categories" => self.data.categories = parse_num(key, value)?,
            "data.noise_std" => self.data.noise_std = parse_num(key, value)?,
            "data.score_min" => self.data.score_min = parse_num(key, value)?,
            "data.score_max" => self.data.score_max = parse_num(key, value)?,
            "data.difficulty" => {
                self.data.difficulty_levels = if parse_bool(key, value)? {
                    Some(DEFAULT_DIFFICULTY_LEVELS.to_vec())
                } else {
                    None
                }
            }
            "data.seed" => self.data.seed = parse_num(key, value)?,
            "model.query_count" => self.decoder.query_count = parse_num(key, value)?,
            "model.model_dim" => self.decoder.model_dim = parse_num(key, value)?,
            "model.layers" => self.decoder.layers = parse_num(key, value)?,
            "model.ffn_dim" => self.decoder.ffn_dim = parse_num(key, value)?,
            "model.self_attention_heads" => {
                self.decoder.self_attention_heads = parse_num(key, value)?
            }
            "model.temperature_init" => self.decoder.temperature_init = parse_num(key, value)?,
            "model.positional_encoding" => self.decoder.positional_encoding = value.parse()?,
            "model.pre_norm" => self.decoder.pre_norm = parse_bool(key, value)?,
            "model.part_generator" => self.part_generator = value.parse()?,
            "model.groups" => self.groups = parse_num(key, value)?,
            "model.fusion" => self.fusion = value.parse()?,
            "loss.classification" => self.loss.weights.classification = parse_num(key, value)?,
            "loss.regression" => self.loss.weights.regression = parse_num(key, value)?,
            "loss.ranking" => self.loss.weights.ranking = parse_num(key, value)?,
            "loss.sparsity" => self.loss.weights.sparsity = parse_num(key, value)?,
            "loss.margin" => self.loss.weights.margin = parse_num(key, value)?,
            "loss.diversity" => {
                self.loss.diversity_instead_of_ranking = parse_bool(key, value)?
            }
            "loss.sigma" => self.loss.diversity_sigma = parse_num(key, value)?,
            "loss.detach_centers" => self.loss.detach_centers = parse_bool(key, value)?,
            "train.batch_size" => self.batch_size = parse_num(key, value)?,
            "train.epochs" => self.epochs = parse_num(key, value)?,
            "train.lr_backbone" => self.lr_backbone = parse_num(key, value)?,
            "train.lr_regressor" => self.lr_regressor = parse_num(key, value)?,
            "train.seed" => self.seed = parse_num(key, value)?,
            "train.exemplars" => self.exemplars = parse_num(key, value)?,
            "train.exemplar_fusion" => self.exemplar_fusion = value.parse()?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.decoder.validate()?;
        self.loss.validate()?;
        if self.groups == 0 {
            return Err(Error::Config("model.groups must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(self.lr_backbone > 0.0) || !(self.lr_regressor > 0.0) {
            return Err(Error::Config(format!(
                "learning rates must be positive, got {} and {}",
                self.lr_backbone, self.lr_regressor
            )));
        }
        if self.exemplars == 0 {
            return Err(Error::Config("train.exemplars must be at least 1".into()));
        }
        Ok(())
    }

    /// Canonical echo: every key in a fixed order, parseable back.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut push = |key: &str, value: String| {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&value);
            out.push('\n');
        };
        push("data.clips_per_video", self.data.clips_per_video.to_string());
        push("data.feature_dim", self.data.feature_dim.to_string());
        push("data.phases", self.data.phases.to_string());
        push("data.train_videos", self.data.train_videos.to_string());
        push("data.val_videos", self.data.val_videos.to_string());
        push("data.test_videos", self.data.test_videos.to_string());
        push("data.categories", self.data.categories.to_string());
        push("data.noise_std", self.data.noise_std.to_string());
        push("data.score_min", self.data.score_min.to_string());
        push("data.score_max", self.data.score_max.to_string());
        push(
            "data.difficulty",
            self.data.difficulty_levels.is_some().to_string(),
        );
        push("data.seed", self.data.seed.to_string());
        push("model.query_count", self.decoder.query_count.to_string());
        push("model.model_dim", self.decoder.model_dim.to_string());
        push("model.layers", self.decoder.layers.to_string());
        push("model.ffn_dim", self.decoder.ffn_dim.to_string());
        push(
            "model.self_attention_heads",
            self.decoder.self_attention_heads.to_string(),
        );
        push(
            "model.temperature_init",
            self.decoder.temperature_init.to_string(),
        );
        push(
            "model.positional_encoding",
            self.decoder.positional_encoding.to_string(),
        );
        push("model.pre_norm", self.decoder.pre_norm.to_string());
        push("model.part_generator", self.part_generator.to_string());
        push("model.groups", self.groups.to_string());
        push("model.fusion", self.fusion.to_string());
        push("loss.classification", self.loss.weights.classification.to_string());
        push("loss.regression", self.loss.weights.regression.to_string());
        push("loss.ranking", self.loss.weights.ranking.to_string());
        push("loss.sparsity", self.loss.weights.sparsity.to_string());
        push("loss.margin", self.loss.weights.margin.to_string());
        push(
            "loss.diversity",
            self.loss.diversity_instead_of_ranking.to_string(),
        );
        push("loss.sigma", self.loss.diversity_sigma.to_string());
        push("loss.detach_centers", self.loss.detach_centers.to_string());
        push("train.batch_size", self.batch_size.to_string());
        push("train.epochs", self.epochs.to_string());
        push("train.lr_backbone", self.lr_backbone.to_string());
        push("train.lr_regressor", self.lr_regressor.to_string());
        push("train.seed", self.seed.to_string());
        push("train.exemplars", self.exemplars.to_string());
        push("train.exemplar_fusion", self.exemplar_fusion.to_string());
        out
    }

    /// Hex SHA-256 of the canonical echo; stamps every run artifact.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.serialize().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parse a config file's text on top of the defaults. Lines are
/// `key = value`; `#` starts a comment; blank lines are skipped.
pub fn parse_config_text(text: &str) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key = value, got {raw:?}", idx + 1))
        })?;
        config.apply(key.trim(), value.trim())?;
    }
    Ok(config)
}
